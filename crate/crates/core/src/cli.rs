//! Command-line workflow: dataset generation, pretraining, evaluation and
//! the batch-size sweep.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clipops::TransformSpace;
use crate::error::{Error, Result};
use crate::evalkit::{
    append_record, equivariance_diagnostic, extract_features, linear_probe, nn_classify, plots, random_baseline,
    retrieval_recall, CropConfig, DiagnosticReport, Neighbors, ProbeConfig,
};
use crate::synthvid::{generate_dataset, load_fvc, write_fvc, GenerateConfig, VideoSet};
use crate::trainloop::{
    load_encoder, pretrain, Arm, AuxTask, Equivariance, Objective, PlanConfig, RunDir, TrainConfig, Trainer,
};

/// k values reported for retrieval.
pub const RECALL_KS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Parser)]
#[command(name = "timeeq", version, about = "Equivariant contrastive video pretraining on synthetic motion data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic motion dataset to an FVC file.
    Generate(GenerateArgs),
    /// Pretrain an encoder and write a run directory.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint on the train/test splits of a dataset.
    Eval(EvalArgs),
    /// Train both arms over several batch sizes and compare.
    SweepBatch(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 128)]
    pub frames: usize,
    /// Frame height and width.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Clip length the data is meant for; used for the speed feasibility check.
    #[arg(long, default_value_t = 16)]
    pub clip_len: usize,
    /// Speed exponents planned for training (stride 2^k).
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    pub speeds: Vec<u8>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// FVC dataset; pretraining uses its training split only.
    #[arg(long)]
    pub data: PathBuf,
    /// Per-class fraction held out as the test split.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Root directory for runs; defaults to $TIMEEQ_RUNS, then ./runs.
    #[arg(long)]
    pub runs_root: Option<PathBuf>,
}

impl DataArgs {
    fn root(&self) -> PathBuf {
        self.runs_root.clone().unwrap_or_else(RunDir::runs_root)
    }

    fn load(&self) -> Result<(VideoSet, VideoSet)> {
        load_fvc(&self.data)?.train_test_split(self.test_fraction)
    }
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Ablation preset a..o.
    #[arg(long, conflicts_with_all = ["equivariance", "objectives", "aux", "config"])]
    pub preset: Option<char>,
    /// TOML training config to start from.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub equivariance: Option<Equivariance>,
    #[arg(long, value_delimiter = ',')]
    pub objectives: Option<Vec<Objective>>,
    #[arg(long, value_delimiter = ',')]
    pub aux: Option<Vec<AuxTask>>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many updates.
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

impl ConfigArgs {
    /// Resolves the flags into a validated config.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match (&self.preset, &self.config) {
            (Some(p), _) => TrainConfig::preset(*p)?,
            (None, Some(path)) => TrainConfig::from_toml(&fs::read_to_string(path)?)?,
            (None, None) => TrainConfig::default(),
        };
        if let Some(e) = self.equivariance {
            cfg.equivariance = e;
        }
        if let Some(o) = &self.objectives {
            cfg.objectives = o.clone();
        }
        if let Some(a) = &self.aux {
            cfg.aux_tasks = a.clone();
        }
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {$(if let Some(v) = self.$flag { cfg.$field = v; })*};
        }
        set!(batch => batch_size, epochs => epochs, seed => seed, lr => base_lr, workers => workers,
             checkpoint_every => checkpoint_every);
        if self.max_steps.is_some() {
            cfg.max_steps = self.max_steps;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Run directory name under the runs root.
    #[arg(long)]
    pub name: String,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Re-run from a manifest written by an earlier run (other config flags are ignored).
    #[arg(long, conflicts_with_all = ["preset", "config", "equivariance", "objectives", "aux"])]
    pub manifest: Option<PathBuf>,
    /// Continue the run from its latest checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Run to evaluate (its final checkpoint).
    #[arg(long, required_unless_present = "checkpoint")]
    pub run: Option<String>,
    /// Explicit checkpoint file.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub temporal_crops: usize,
    #[arg(long, default_value_t = 1)]
    pub spatial_crops: usize,
    /// ψ codes in the transform-matching diagnostic.
    #[arg(long, default_value_t = 512)]
    pub probes: usize,
    /// Also score freshly initialized models of the same architecture.
    #[arg(long)]
    pub random_baseline: bool,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Output directory; defaults to `<run>/eval`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Prefix of the per-setting run names.
    #[arg(long, default_value = "sweep")]
    pub name: String,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
    pub batches: Vec<usize>,
    /// TOML config supplying model size, clip geometry and optimizer settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

/// Everything needed to reproduce a pretraining run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub config: TrainConfig,
    pub seed: u64,
    pub dataset: PathBuf,
    pub test_fraction: f64,
    /// Git-style blob hash (SHA-256) of the config TOML.
    pub config_hash: String,
    pub created_at: String,
    pub finished_at: Option<String>,
}

impl RunManifest {
    pub fn new(name: &str, config: TrainConfig, data: &DataArgs) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            seed: config.seed,
            config_hash: blob_hash(config.to_toml()?.as_bytes()),
            config,
            dataset: data.data.clone(),
            test_fraction: data.test_fraction,
            created_at: now(),
            finished_at: None,
        })
    }

    pub fn path(run: &RunDir) -> PathBuf {
        run.path.join("manifest.json")
    }

    pub fn write(&self, run: &RunDir) -> Result<()> {
        fs::write(Self::path(run), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if blob_hash(m.config.to_toml()?.as_bytes()) != m.config_hash {
            return Err(Error::Config(format!("{} does not match its config hash", path.display())));
        }
        Ok(m)
    }
}

/// `sha256("blob <len>\0" ++ content)` in hex, as git's SHA-256 object format.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Pretrain(a) => cmd_pretrain(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::SweepBatch(a) => cmd_sweep_batch(&a).map(|_| ()),
    }
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let cfg = GenerateConfig {
        n_classes: a.classes,
        n_per_class: a.per_class,
        frames: a.frames,
        height: a.size,
        width: a.size,
        channels: a.channels,
        seed: a.seed,
    };
    cfg.validate()?;
    let space = TransformSpace {
        speeds: a.speeds.clone(),
        allow_reverse: true,
    };
    space.validate()?;
    let feasible = space.feasible_speeds(a.frames, a.clip_len);
    if feasible.is_empty() {
        return Err(Error::VideoTooShort {
            video_len: a.frames,
            clip_len: a.clip_len,
        });
    }
    for k in a.speeds.iter().filter(|k| !feasible.contains(k)) {
        log::warn!(
            "speed {}x is infeasible for {}-frame clips of {}-frame videos and will be dropped",
            1u32 << k,
            a.clip_len,
            a.frames
        );
    }
    let set = generate_dataset(&cfg)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_fvc(&a.out, &set)?;
    log::info!("wrote {} videos to {}", set.len(), a.out.display());
    Ok(())
}

fn resolve_pretrain(a: &PretrainArgs) -> Result<(TrainConfig, DataArgs)> {
    match &a.manifest {
        Some(path) => {
            let m = RunManifest::read(path)?;
            let data = DataArgs {
                data: m.dataset,
                test_fraction: m.test_fraction,
                runs_root: a.data.runs_root.clone(),
            };
            Ok((m.config, data))
        }
        None => Ok((a.config.resolve()?, a.data.clone())),
    }
}

/// Trains and returns the run directory. All flags and inputs are checked
/// before anything is created on disk.
pub fn cmd_pretrain(a: &PretrainArgs) -> Result<RunDir> {
    let (cfg, data_args) = resolve_pretrain(a)?;
    let (train, _) = data_args.load()?;
    cfg.encoder_config().validate()?;
    if cfg.transform_space().feasible_speeds(train.t, cfg.clip_len).is_empty() {
        return Err(Error::VideoTooShort {
            video_len: train.t,
            clip_len: cfg.clip_len,
        });
    }
    let root = data_args.root();
    let (run, mut trainer) = if a.resume {
        let run = RunDir::open(&root, &a.name)?;
        let ckpt = run
            .latest_checkpoint()?
            .ok_or_else(|| Error::Config(format!("run {} has no checkpoint to resume", a.name)))?;
        (run, Trainer::load_checkpoint(&ckpt)?)
    } else {
        if root.join(&a.name).exists() {
            return Err(Error::Config(format!(
                "run {} already exists under {} (use --resume)",
                a.name,
                root.display()
            )));
        }
        let trainer = Trainer::new(cfg.clone(), train.len())?;
        let run = RunDir::create(&root, &a.name)?;
        let manifest = RunManifest::new(&a.name, cfg.clone(), &data_args)?;
        manifest.write(&run)?;
        fs::write(run.path.join("config.toml"), cfg.to_toml()?)?;
        (run, trainer)
    };
    log::info!(
        "run {}: {} steps, batch {}, objectives {:?}, equivariance {:?}, arm {}",
        a.name,
        trainer.total_steps,
        trainer.config.batch_size,
        trainer.config.objectives,
        trainer.config.equivariance,
        trainer.config.arm
    );
    pretrain(&mut trainer, &train, Some(&run))?;
    if !a.resume {
        let mut m: RunManifest = serde_json::from_str(&fs::read_to_string(RunManifest::path(&run))?)?;
        m.finished_at = Some(now());
        m.write(&run)?;
    }
    Ok(run)
}

/// One line of `eval.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub checkpoint: PathBuf,
    pub step: u64,
    pub nn_accuracy: f64,
    pub linear_accuracy: f64,
    pub recall_ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub diagnostic: DiagnosticReport,
    pub random_baseline: Option<DiagnosticReport>,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalRecord> {
    if a.probes < 2 || a.probes % 2 != 0 {
        return Err(Error::Config(format!("--probes must be even and at least 2, got {}", a.probes)));
    }
    let root = a.data.root();
    let run = a.run.as_ref().map(|n| RunDir::open(&root, n)).transpose()?;
    let ckpt = match (&a.checkpoint, &run) {
        (Some(p), _) => p.clone(),
        (None, Some(r)) => r
            .latest_checkpoint()?
            .ok_or_else(|| Error::Config(format!("no checkpoint in {}", r.path.display())))?,
        (None, None) => unreachable!("clap requires --run or --checkpoint"),
    };
    if !ckpt.is_file() {
        return Err(Error::Config(format!("checkpoint {} not found", ckpt.display())));
    }
    let out = match (&a.out, &run) {
        (Some(o), _) => o.clone(),
        (None, Some(r)) => r.path.join("eval"),
        (None, None) => ckpt.with_extension("eval"),
    };
    let (model, cfg, step) = load_encoder(&ckpt)?;
    let (train, test) = a.data.load()?;
    let crops = CropConfig {
        n_temporal: a.temporal_crops,
        n_spatial: a.spatial_crops,
        threads: a.threads,
        ..CropConfig::default()
    };
    let train_bank = extract_features(&model, &train, &crops, None)?;
    let test_bank = extract_features(&model, &test, &crops, Some(&train_bank.stats))?;
    let nn_accuracy = nn_classify(&train_bank, &test_bank, Neighbors::Disjoint)?;
    let linear_accuracy = linear_probe(&train_bank, &test_bank, &ProbeConfig::default())?;
    let recall = retrieval_recall(&test_bank, &train_bank, &RECALL_KS, Neighbors::Disjoint)?;
    let plan_cfg = diagnostic_plan(&cfg);
    let diagnostic = equivariance_diagnostic(&model, &test, a.probes, &plan_cfg, cfg.seed)?;
    let baseline = if a.random_baseline {
        let seeds: Vec<u64> = (1..=3).map(|k| cfg.seed.wrapping_add(1000 * k)).collect();
        Some(random_baseline(&model.config, &test, a.probes, &plan_cfg, &seeds)?)
    } else {
        None
    };
    let rec = EvalRecord {
        checkpoint: ckpt.clone(),
        step,
        nn_accuracy,
        linear_accuracy,
        recall_ks: RECALL_KS.to_vec(),
        recall,
        diagnostic,
        random_baseline: baseline,
    };

    fs::create_dir_all(&out)?;
    append_record(&out.join("eval.jsonl"), &rec)?;
    train_bank.save(&out.join("train_bank.safetensors"))?;
    test_bank.save(&out.join("test_bank.safetensors"))?;
    let cats: Vec<String> = RECALL_KS.iter().map(|k| format!("R@{k}")).collect();
    plots::bar_chart(&out.join("recall.svg"), "retrieval recall", &cats, &[("test vs train".into(), rec.recall.clone())])?;
    if let Some(r) = &run {
        if r.metrics_path().exists() {
            plot_losses(r, &out.join("loss.svg"))?;
        }
    }
    println!("{}", summary_table(&rec));
    Ok(rec)
}

/// The diagnostic always probes temporal transforms, plus spatial ones if trained on them.
fn diagnostic_plan(cfg: &TrainConfig) -> PlanConfig {
    let equivariance = match cfg.equivariance {
        Equivariance::None => Equivariance::Temporal,
        e => e,
    };
    PlanConfig::from_train(&TrainConfig {
        equivariance,
        arm: Arm::Equivariant,
        ..cfg.clone()
    })
}

fn plot_losses(run: &RunDir, path: &Path) -> Result<()> {
    let recs = run.read_metrics()?;
    let pick = |name: &str, f: fn(&crate::objectives::LossBreakdown) -> f64| plots::Series {
        name: name.into(),
        points: recs.iter().map(|r| (r.step as f64, f(&r.loss))).collect(),
    };
    let series: Vec<plots::Series> = [
        pick("total", |l| l.total),
        pick("equi", |l| l.equi),
        pick("inst", |l| l.inst),
        pick("speed", |l| l.aux_speed),
        pick("direction", |l| l.aux_direction),
        pick("order", |l| l.aux_overlap),
    ]
    .into_iter()
    .filter(|s| s.points.iter().any(|p| p.1 != 0.0))
    .collect();
    plots::line_chart(path, "training loss", "step", "loss", &series)
}

pub fn summary_table(r: &EvalRecord) -> String {
    let mut s = format!("checkpoint   {} (step {})\n", r.checkpoint.display(), r.step);
    s += &format!("1-NN         {:.2}%\n", 100.0 * r.nn_accuracy);
    s += &format!("linear       {:.2}%\n", 100.0 * r.linear_accuracy);
    for (k, v) in r.recall_ks.iter().zip(&r.recall) {
        s += &format!("R@{k:<10} {:.2}%\n", 100.0 * v);
    }
    let d = &r.diagnostic;
    s += &format!(
        "transform    {:.2}% match (chance {:.2}%) over {} codes\n",
        100.0 * d.match_accuracy,
        100.0 * d.chance,
        d.n_codes
    );
    s += &format!(
        "heads        speed {:.2}%  direction {:.2}%  order {:.2}%\n",
        100.0 * d.speed_accuracy,
        100.0 * d.direction_accuracy,
        100.0 * d.overlap_accuracy
    );
    if let Some(b) = &r.random_baseline {
        s += &format!("random init  {:.2}% match\n", 100.0 * b.match_accuracy);
    }
    s
}

/// One line of `sweep.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub arm: Arm,
    pub batch_size: usize,
    pub run: String,
    pub final_loss: f64,
    pub finite: bool,
    pub nn_accuracy: Option<f64>,
}

/// Config of one sweep arm.
pub fn sweep_config(arm: Arm, batch: usize, a: &SweepArgs) -> Result<TrainConfig> {
    let shared = match &a.config {
        Some(p) => TrainConfig::from_toml(&fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    let objectives = match arm {
        Arm::Equivariant => TrainConfig::preset('k')?,
        Arm::Distinctive => TrainConfig::preset('e')?,
    };
    let base = TrainConfig {
        arm,
        equivariance: objectives.equivariance,
        objectives: objectives.objectives,
        aux_tasks: objectives.aux_tasks,
        allow_reverse: objectives.allow_reverse,
        ..shared
    };
    let cfg = TrainConfig {
        batch_size: batch,
        epochs: a.epochs,
        max_steps: a.max_steps,
        seed: a.seed,
        workers: a.workers,
        base_lr: a.lr.unwrap_or(base.base_lr),
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_sweep_batch(a: &SweepArgs) -> Result<Vec<SweepRow>> {
    let configs = [Arm::Equivariant, Arm::Distinctive]
        .into_iter()
        .flat_map(|arm| a.batches.iter().map(move |&b| (arm, b)))
        .map(|(arm, b)| Ok((arm, b, sweep_config(arm, b, a)?)))
        .collect::<Result<Vec<_>>>()?;
    let (train, test) = a.data.load()?;
    let root = a.data.root();
    let names: Vec<String> = configs
        .iter()
        .map(|(arm, b, _)| format!("{}_{}_b{b}", a.name, arm.to_string().to_lowercase()))
        .collect();
    if let Some(n) = names.iter().find(|n| root.join(n).exists()) {
        return Err(Error::Config(format!("run {n} already exists under {}", root.display())));
    }
    let out = root.join(format!("{}_summary", a.name));
    let crops = CropConfig::default();
    let mut rows = Vec::new();
    for ((arm, b, cfg), name) in configs.into_iter().zip(names) {
        let run = RunDir::create(&root, &name)?;
        RunManifest::new(&name, cfg.clone(), &a.data)?.write(&run)?;
        let mut trainer = Trainer::new(cfg, train.len())?;
        let row = match pretrain(&mut trainer, &train, Some(&run)) {
            Ok(recs) => {
                let train_bank = extract_features(&trainer.model, &train, &crops, None)?;
                let test_bank = extract_features(&trainer.model, &test, &crops, Some(&train_bank.stats))?;
                SweepRow {
                    arm,
                    batch_size: b,
                    run: name,
                    final_loss: recs.last().map_or(f64::NAN, |r| r.loss.total),
                    finite: true,
                    nn_accuracy: Some(nn_classify(&train_bank, &test_bank, Neighbors::Disjoint)?),
                }
            }
            Err(Error::NonFiniteLoss { step, dump }) => {
                log::error!("{name}: non-finite loss at step {step}, batch dumped to {dump:?}");
                SweepRow {
                    arm,
                    batch_size: b,
                    run: name,
                    final_loss: f64::NAN,
                    finite: false,
                    nn_accuracy: None,
                }
            }
            Err(e) => return Err(e),
        };
        fs::create_dir_all(&out)?;
        append_record(&out.join("sweep.jsonl"), &row)?;
        println!(
            "{:<12} batch {:>3}  final loss {:>8.4}  1-NN {}",
            row.arm.to_string(),
            row.batch_size,
            row.final_loss,
            row.nn_accuracy.map_or("n/a".into(), |v| format!("{:.2}%", 100.0 * v))
        );
        rows.push(row);
    }
    let series: Vec<plots::Series> = [Arm::Equivariant, Arm::Distinctive]
        .iter()
        .map(|arm| plots::Series {
            name: arm.to_string(),
            points: rows
                .iter()
                .filter(|r| r.arm == *arm)
                .filter_map(|r| r.nn_accuracy.map(|v| ((r.batch_size as f64).log2(), 100.0 * v)))
                .collect(),
        })
        .filter(|s| !s.points.is_empty())
        .collect();
    if !series.is_empty() {
        plots::line_chart(&out.join("sweep.svg"), "1-NN accuracy vs batch size", "log2(batch size)", "1-NN (%)", &series)?;
    }
    Ok(rows)
}
