//! Batch planning, the shared-forward training step, the optimization
//! schedule, ablation presets and run persistence.

mod config;
mod plan;
mod step;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{Arm, AuxTask, Equivariance, Objective, TrainConfig, PRESETS};
pub use plan::{
    materialize, plan_batch, Batch, BatchLayout, BatchPlan, Couple, PairDescriptor, PlanConfig, SpatialRelative,
    MAX_RESAMPLE,
};
pub use step::{forward_backward, ObjectiveSetup, Targets};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, AdamW, Archive, Module, WarmupCosine};
use crate::objectives::LossBreakdown;
use crate::synthvid::VideoSet;

/// Environment variable overriding the `runs/` root.
pub const RUNS_ENV: &str = "TIMEEQ_RUNS";

const CKPT_FORMAT: &str = "timeeq-checkpoint-1";

/// One line of `metrics.jsonl`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 63) | epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// The batch of step `step`: a pure function of the config, the data and the step.
pub fn make_batch(cfg: &TrainConfig, data: &VideoSet, step: u64) -> Result<Batch<f32>> {
    let spe = cfg.steps_per_epoch(data.len());
    if spe == 0 {
        return Err(Error::Config(format!(
            "{} videos cannot fill a batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let (epoch, slot) = (step / spe, (step % spe) as usize);
    let perm = epoch_permutation(cfg.seed, epoch, data.len());
    let videos = &perm[slot * cfg.batch_size..(slot + 1) * cfg.batch_size];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step);
    let lens = vec![data.t; videos.len()];
    let plan = plan_batch(&mut rng, videos, &lens, (data.h, data.w), &PlanConfig::from_train(cfg))?;
    materialize(step, plan, data, cfg.clip_len, cfg.resolution)
}

/// Model, optimizer and schedule position.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Encoder<f32>,
    pub optimizer: AdamW<f32>,
    /// Number of completed updates.
    pub step: u64,
    pub total_steps: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, n_videos: usize) -> Result<Self> {
        config.validate()?;
        let total_steps = config.total_steps(n_videos);
        if total_steps == 0 {
            return Err(Error::Config(format!(
                "{n_videos} videos give no full batch of {}",
                config.batch_size
            )));
        }
        Ok(Self {
            model: Encoder::new(config.encoder_config(), config.seed)?,
            optimizer: AdamW::new(config.weight_decay),
            step: 0,
            total_steps,
            config,
        })
    }

    pub fn schedule(&self) -> WarmupCosine {
        WarmupCosine::new(self.config.base_lr, self.total_steps, self.config.warmup_fraction)
    }

    pub fn setup(&self) -> ObjectiveSetup {
        ObjectiveSetup {
            weights: self.config.effective_weights(),
            temperature: self.config.temperature,
        }
    }

    /// Forward, backward, clipping and one AdamW update.
    pub fn train_step(&mut self, batch: &Batch<f32>) -> Result<StepRecord> {
        let lr = self.schedule().lr(self.step);
        let setup = self.setup();
        let (loss, _) = forward_backward(&mut self.model, batch, &setup, None, true)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, dump: None });
        }
        let grad_norm = clip_grad_norm(&mut self.model, self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, dump: None });
        }
        self.optimizer.step(&mut self.model, lr);
        let rec = StepRecord {
            step: self.step,
            lr,
            loss,
            grad_norm,
        };
        self.step += 1;
        Ok(rec)
    }

    /// Trains until `until` updates are done, producing batches on
    /// `config.workers` threads. Worker `w` builds the batches of steps
    /// congruent to `w`, and the optimizer consumes them in step order.
    pub fn run<C>(&mut self, data: &VideoSet, until: u64, mut on_step: C) -> Result<()>
    where
        C: FnMut(&mut Trainer, &StepRecord) -> Result<()>,
    {
        let until = until.min(self.total_steps);
        let start = self.step;
        if start >= until {
            return Ok(());
        }
        let n = self.config.workers.max(1) as u64;
        let cfg = self.config.clone();
        thread::scope(|s| {
            let mut queues = Vec::new();
            for w in 0..n {
                let (tx, rx) = sync_channel::<Result<Batch<f32>>>(2);
                queues.push(rx);
                let cfg = &cfg;
                s.spawn(move || {
                    let mut st = start + w;
                    while st < until {
                        if tx.send(make_batch(cfg, data, st)).is_err() {
                            break;
                        }
                        st += n;
                    }
                });
            }
            for st in start..until {
                let batch = queues[((st - start) % n) as usize]
                    .recv()
                    .map_err(|_| Error::Config("data worker exited early".into()))??;
                let rec = self.train_step(&batch)?;
                on_step(self, &rec)?;
            }
            Ok(())
        })
    }

    pub fn to_archive(&mut self) -> Result<Archive<f32>> {
        let mut a = Archive::new();
        self.model
            .visit_params("", &mut |name, p| a.insert(format!("param.{name}"), &p.shape, p.value.clone()));
        self.model
            .visit_buffers("", &mut |name, b| a.insert(format!("buffer.{name}"), &[b.len()], b.clone()));
        for (name, (m, v)) in &self.optimizer.moments {
            a.insert(format!("adam_m.{name}"), &[m.len()], m.clone());
            a.insert(format!("adam_v.{name}"), &[v.len()], v.clone());
        }
        a.metadata.insert("format".into(), CKPT_FORMAT.into());
        a.metadata.insert("config".into(), serde_json::to_string(&self.config)?);
        a.metadata.insert("encoder".into(), serde_json::to_string(&self.model.config)?);
        a.metadata.insert("step".into(), self.step.to_string());
        a.metadata.insert("total_steps".into(), self.total_steps.to_string());
        a.metadata.insert("adam_t".into(), self.optimizer.t.to_string());
        Ok(a)
    }

    pub fn from_archive(a: &Archive<f32>) -> Result<Self> {
        if a.meta("format")? != CKPT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", a.meta("format")?)));
        }
        let config: TrainConfig = serde_json::from_str(a.meta("config")?)?;
        let parse = |k: &str| -> Result<u64> {
            a.meta(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("metadata {k:?} is not an integer")))
        };
        let mut model = Encoder::new(config.encoder_config(), config.seed)?;
        let mut missing = None;
        model.visit_params("", &mut |name, p| match a.get(&format!("param.{name}")) {
            Ok((shape, v)) if *shape == p.shape => p.value.clone_from(v),
            _ => missing = Some(name.to_string()),
        });
        model.visit_buffers("", &mut |name, b| match a.get(&format!("buffer.{name}")) {
            Ok((_, v)) if v.len() == b.len() => b.clone_from(v),
            _ => missing = Some(name.to_string()),
        });
        if let Some(name) = missing {
            return Err(Error::Checkpoint(format!("tensor {name:?} missing or misshapen")));
        }
        let mut optimizer = AdamW::new(config.weight_decay);
        optimizer.t = parse("adam_t")?;
        for (key, (_, m)) in a.tensors.range("adam_m.".to_string().."adam_m/".to_string()) {
            let name = &key["adam_m.".len()..];
            let (_, v) = a.get(&format!("adam_v.{name}"))?;
            optimizer.moments.insert(name.to_string(), (m.clone(), v.clone()));
        }
        Ok(Self {
            model,
            optimizer,
            step: parse("step")?,
            total_steps: parse("total_steps")?,
            config,
        })
    }

    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Loads only the network from a checkpoint.
pub fn load_encoder(path: &Path) -> Result<(Encoder<f32>, TrainConfig, u64)> {
    let t = Trainer::load_checkpoint(path)?;
    Ok((t.model, t.config, t.step))
}

/// `runs/<name>/` with its config, metrics, checkpoints and dumps.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn runs_root() -> PathBuf {
        std::env::var_os(RUNS_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
    }

    pub fn create(root: &Path, name: &str) -> Result<Self> {
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(Error::Config(format!("invalid run name {name:?}")));
        }
        let path = root.join(name);
        fs::create_dir_all(&path)?;
        Ok(Self { path })
    }

    pub fn open(root: &Path, name: &str) -> Result<Self> {
        let path = root.join(name);
        if !path.is_dir() {
            return Err(Error::Config(format!("no run directory at {}", path.display())));
        }
        Ok(Self { path })
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.path.join(format!("ckpt_{step}"))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.path.join("metrics.jsonl")
    }

    /// Highest-step checkpoint in the directory.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let mut best: Option<(u64, PathBuf)> = None;
        for entry in fs::read_dir(&self.path)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(step) = name.strip_prefix("ckpt_").and_then(|s| s.parse::<u64>().ok()) {
                if best.as_ref().is_none_or(|(b, _)| step > *b) {
                    best = Some((step, entry.path()));
                }
            }
        }
        Ok(best.map(|(_, p)| p))
    }

    pub fn append_metrics(&self, rec: &StepRecord) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.metrics_path())?;
        writeln!(f, "{}", serde_json::to_string(rec)?)?;
        Ok(())
    }

    pub fn read_metrics(&self) -> Result<Vec<StepRecord>> {
        let text = fs::read_to_string(self.metrics_path())?;
        text.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
    }

    /// Writes the offending batch's plan and layout for post-mortem inspection.
    pub fn dump_batch(&self, batch: &Batch<f32>) -> Result<PathBuf> {
        let path = self.path.join(format!("nonfinite_step{}.json", batch.step));
        let body = serde_json::json!({
            "step": batch.step,
            "plan": batch.plan,
            "layout": batch.layout,
            "clip_shape": batch.clips.shape,
            "clips_finite": batch.clips.data.iter().all(|v| v.is_finite()),
        });
        fs::write(&path, serde_json::to_string_pretty(&body)?)?;
        Ok(path)
    }
}

/// Trains `trainer` to the end of its schedule, appending metrics and
/// writing checkpoints into `run` when given. A non-finite loss aborts the
/// run after dumping the batch.
pub fn pretrain(trainer: &mut Trainer, data: &VideoSet, run: Option<&RunDir>) -> Result<Vec<StepRecord>> {
    let mut records = Vec::new();
    let every = trainer.config.checkpoint_every;
    let total = trainer.total_steps;
    let result = trainer.run(data, total, |t, rec| {
        if let Some(r) = run {
            r.append_metrics(rec)?;
            if every > 0 && t.step % every == 0 && t.step < total {
                t.save_checkpoint(&r.checkpoint_path(t.step))?;
            }
        }
        log::info!(
            "step {} lr {:.2e} total {:.4} equi {:.4} inst {:.4} speed {:.4} dir {:.4} order {:.4}",
            rec.step,
            rec.lr,
            rec.loss.total,
            rec.loss.equi,
            rec.loss.inst,
            rec.loss.aux_speed,
            rec.loss.aux_direction,
            rec.loss.aux_overlap
        );
        records.push(*rec);
        Ok(())
    });
    match result {
        Err(Error::NonFiniteLoss { step, .. }) => {
            let dump = match run {
                Some(r) => Some(r.dump_batch(&make_batch(&trainer.config, data, step)?)?),
                None => None,
            };
            Err(Error::NonFiniteLoss { step, dump })
        }
        Err(e) => Err(e),
        Ok(()) => {
            if let Some(r) = run {
                trainer.save_checkpoint(&r.checkpoint_path(trainer.step))?;
            }
            Ok(records)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthvid::{generate_dataset, GenerateConfig};

    fn tiny_data() -> VideoSet {
        generate_dataset(&GenerateConfig {
            n_classes: 4,
            n_per_class: 4,
            frames: 64,
            height: 24,
            width: 24,
            channels: 3,
            seed: 5,
        })
        .unwrap()
    }

    fn tiny(preset: char) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs: 2,
            clip_len: 8,
            resolution: 16,
            widths: [4, 4, 8, 16],
            base_lr: 1e-3,
            ..TrainConfig::preset(preset).unwrap()
        }
    }

    fn run_records(cfg: TrainConfig, data: &VideoSet, steps: u64) -> Vec<StepRecord> {
        let mut t = Trainer::new(cfg, data.len()).unwrap();
        let mut out = Vec::new();
        t.run(data, steps, |_, r| {
            out.push(*r);
            Ok(())
        })
        .unwrap();
        out
    }

    #[test]
    fn batches_depend_only_on_seed_and_step() {
        let data = tiny_data();
        let cfg = tiny('c');
        let a = make_batch(&cfg, &data, 3).unwrap();
        let b = make_batch(&cfg, &data, 3).unwrap();
        let c = make_batch(&cfg, &data, 4).unwrap();
        assert_eq!(a.plan, b.plan);
        assert_eq!(a.clips.data, b.clips.data);
        assert_ne!(a.plan, c.plan);
    }

    #[test]
    fn epoch_covers_every_video_once() {
        let data = tiny_data();
        let cfg = tiny('d');
        let mut seen: Vec<usize> = (0..cfg.steps_per_epoch(data.len()))
            .flat_map(|s| {
                let b = make_batch(&cfg, &data, s).unwrap();
                b.plan.couples.iter().flat_map(|c| [c.videos.0, c.videos.1]).collect::<Vec<_>>()
            })
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..data.len()).collect::<Vec<_>>());
    }

    #[test]
    fn worker_count_does_not_change_training() {
        let data = tiny_data();
        let one = run_records(tiny('c'), &data, 4);
        let three = run_records(TrainConfig { workers: 3, ..tiny('c') }, &data, 4);
        assert_eq!(one, three);
    }

    #[test]
    fn every_preset_trains() {
        let data = tiny_data();
        for p in PRESETS {
            let recs = run_records(tiny(p), &data, 2);
            assert_eq!(recs.len(), 2, "preset {p}");
            assert!(recs.iter().all(|r| r.loss.is_finite()), "preset {p}");
        }
    }

    #[test]
    fn zero_weights_reproduce_instance_only_update() {
        let data = tiny_data();
        let full = TrainConfig {
            weight_equi: 0.0,
            weight_speed: 0.0,
            weight_direction: 0.0,
            weight_overlap: 0.0,
            ..tiny('d')
        };
        let inst_only = TrainConfig {
            objectives: vec![Objective::Inst],
            ..tiny('d')
        };
        let mut a = Trainer::new(full, data.len()).unwrap();
        let mut b = Trainer::new(inst_only, data.len()).unwrap();
        a.run(&data, 2, |_, _| Ok(())).unwrap();
        b.run(&data, 2, |_, _| Ok(())).unwrap();
        let (mut pa, mut pb) = (Vec::new(), Vec::new());
        a.model.visit_params("", &mut |_, p| pa.extend_from_slice(&p.value));
        b.model.visit_params("", &mut |_, p| pb.extend_from_slice(&p.value));
        assert_eq!(pa, pb);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = tiny_data();
        let cfg = TrainConfig { epochs: 8, ..tiny('c') };
        let full = run_records(cfg.clone(), &data, 14);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt_4");
        let mut t = Trainer::new(cfg, data.len()).unwrap();
        t.run(&data, 4, |_, _| Ok(())).unwrap();
        t.save_checkpoint(&path).unwrap();
        drop(t);
        let mut resumed = Trainer::load_checkpoint(&path).unwrap();
        assert_eq!(resumed.step, 4);
        let mut tail = Vec::new();
        resumed
            .run(&data, 14, |_, r| {
                tail.push(*r);
                Ok(())
            })
            .unwrap();
        assert_eq!(tail.len(), 10);
        assert_eq!(&full[4..], &tail[..]);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let data = tiny_data();
        let mut t = Trainer::new(tiny('d'), data.len()).unwrap();
        t.run(&data, 2, |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt_2");
        t.save_checkpoint(&path).unwrap();
        let mut back = Trainer::load_checkpoint(&path).unwrap();
        let (mut pa, mut pb) = (Vec::new(), Vec::new());
        t.model.visit_params("", &mut |_, p| pa.extend_from_slice(&p.value));
        back.model.visit_params("", &mut |_, p| pb.extend_from_slice(&p.value));
        assert_eq!(pa, pb);
        assert_eq!(back.optimizer.moments, t.optimizer.moments);
        assert_eq!(back.optimizer.t, t.optimizer.t);
        assert_eq!(back.config, t.config);

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() / 2);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(Trainer::load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn loss_decreases_on_small_run() {
        let data = tiny_data();
        let cfg = TrainConfig { epochs: 30, base_lr: 3e-3, ..tiny('e') };
        let recs = run_records(cfg, &data, 60);
        let head: f64 = recs[..10].iter().map(|r| r.loss.total).sum::<f64>() / 10.0;
        let tail: f64 = recs[50..].iter().map(|r| r.loss.total).sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn schedule_warms_up_and_decays() {
        let data = tiny_data();
        let t = Trainer::new(TrainConfig { epochs: 50, ..tiny('e') }, data.len()).unwrap();
        let s = t.schedule();
        assert_eq!(t.total_steps, 100);
        assert_eq!(s.lr(0), 0.0);
        assert!(s.lr(2) < s.lr(5));
        assert!((s.lr(5) - t.config.base_lr).abs() < 1e-12);
        assert!(s.lr(60) < s.lr(30));
        assert!(s.lr(100).abs() < 1e-12);
    }

    #[test]
    fn descriptor_collisions_are_rare() {
        let cfg = PlanConfig::from_train(&TrainConfig::preset('d').unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let videos: Vec<usize> = (0..16).collect();
        let lens = vec![128; 16];
        let hit = (0..1000)
            .filter(|_| plan_batch(&mut rng, &videos, &lens, (32, 32), &cfg).unwrap().collisions() > 0)
            .count();
        assert!(hit < 50, "{hit} of 1000 batches collided");
    }

    #[test]
    fn run_dir_metrics_and_latest_checkpoint() {
        let root = tempfile::tempdir().unwrap();
        let data = tiny_data();
        let run = RunDir::create(root.path(), "r1").unwrap();
        let mut t = Trainer::new(TrainConfig { checkpoint_every: 2, ..tiny('e') }, data.len()).unwrap();
        let recs = pretrain(&mut t, &data, Some(&run)).unwrap();
        assert_eq!(run.read_metrics().unwrap(), recs);
        assert_eq!(run.latest_checkpoint().unwrap(), Some(run.checkpoint_path(4)));
        assert!(run.checkpoint_path(2).exists());
        assert!(RunDir::create(root.path(), "../x").is_err());
    }
}
