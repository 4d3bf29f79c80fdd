use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{ranked_neighbors, Neighbors};
use super::embed_clips;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::synthvid::VideoSet;
use crate::trainloop::{materialize, plan_batch, Arm, BatchPlan, Equivariance, PairDescriptor, PlanConfig};

/// Outcome of [`equivariance_diagnostic`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub n_codes: usize,
    /// Fraction of ψ codes whose nearest other code has the same relative transform.
    pub match_accuracy: f64,
    /// Expected match accuracy of a ranking that ignores the codes.
    pub chance: f64,
    pub speed_accuracy: f64,
    pub direction_accuracy: f64,
    pub overlap_accuracy: f64,
}

/// Plans `n_couples` couples over `videos`, drawing batches of at most the
/// whole set until enough couples exist.
pub fn plan_probes(videos: &VideoSet, n_couples: usize, cfg: &PlanConfig, seed: u64) -> Result<BatchPlan> {
    let usable = videos.len() - videos.len() % 2;
    if usable < 4 {
        return Err(Error::Config(format!("{} videos; the diagnostic needs at least 4", videos.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut couples = Vec::with_capacity(n_couples);
    let lens = vec![videos.t; usable];
    while couples.len() < n_couples {
        let mut order: Vec<usize> = (0..videos.len()).collect();
        order.shuffle(&mut rng);
        order.truncate(usable);
        let plan = plan_batch(&mut rng, &order, &lens, (videos.h, videos.w), cfg)?;
        couples.extend(plan.couples);
    }
    couples.truncate(n_couples);
    Ok(BatchPlan {
        arm: Arm::Equivariant,
        equivariance: cfg.equivariance,
        couples,
    })
}

fn accuracy(logits: &Matrix<f32>, labels: &[usize]) -> f64 {
    let hits = (0..logits.rows)
        .filter(|&r| crate::encoder::argmax(logits.row(r)) == labels[r])
        .count();
    hits as f64 / logits.rows.max(1) as f64
}

fn to_matrix(a: &Array2<f64>) -> Matrix<f32> {
    Matrix::from_vec(a.iter().map(|&v| v as f32).collect(), a.nrows(), a.ncols())
}

/// ψ-code transform matching plus auxiliary-head accuracies on held-out clips.
///
/// `n_probes` is the number of ψ codes; every couple contributes one code per
/// member, so `n_probes / 2` couples are sampled as in training.
pub fn equivariance_diagnostic(
    model: &Encoder<f32>,
    videos: &VideoSet,
    n_probes: usize,
    cfg: &PlanConfig,
    seed: u64,
) -> Result<DiagnosticReport> {
    if n_probes < 2 || n_probes % 2 != 0 {
        return Err(Error::Config(format!("n_probes must be even and at least 2, got {n_probes}")));
    }
    if cfg.equivariance == Equivariance::None {
        return Err(Error::Config("the diagnostic needs a non-empty equivariance set".into()));
    }
    let cfg = PlanConfig {
        arm: Arm::Equivariant,
        clip_len: model.config.clip_len,
        ..cfg.clone()
    };
    let plan = plan_probes(videos, n_probes / 2, &cfg, seed)?;
    let descriptors: Vec<PairDescriptor> = plan.couples.iter().map(|c| c.descriptor(cfg.equivariance)).collect();
    let batch = materialize::<f32>(0, plan, videos, model.config.clip_len, model.config.resolution)?;
    let mut model = model.clone();
    let e = to_matrix(&embed_clips(&mut model, &batch.clips, 32)?);
    let l = &batch.layout;
    let (p_rows, q_rows): (Vec<usize>, Vec<usize>) = l.pairs.iter().copied().unzip();
    let (ep, eq) = (e.select_rows(&p_rows), e.select_rows(&q_rows));
    let codes = model.psi_forward(&ep, &eq);
    let codes = Array2::from_shape_fn((codes.rows, codes.cols), |(i, j)| codes.row(i)[j] as f64);

    let n = codes.nrows();
    let ranked = ranked_neighbors(&codes, &codes, Neighbors::ExcludeSelf)?;
    let group = |i: usize| &descriptors[l.pair_groups[i]];
    let hits = (0..n).filter(|&i| group(ranked[i][0]) == group(i)).count();
    let chance = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && group(j) == group(i)).count() as f64 / (n - 1) as f64)
        .sum::<f64>()
        / n as f64;

    Ok(DiagnosticReport {
        n_codes: n,
        match_accuracy: hits as f64 / n as f64,
        chance,
        speed_accuracy: accuracy(&model.head_speed(&e), &l.speed_labels),
        direction_accuracy: accuracy(&model.head_direction(&e), &l.direction_labels),
        overlap_accuracy: accuracy(&model.head_overlap(&ep, &eq), &l.overlap_labels),
    })
}

/// Mean diagnostic over freshly initialized models of the same architecture.
pub fn random_baseline(
    config: &EncoderConfig,
    videos: &VideoSet,
    n_probes: usize,
    cfg: &PlanConfig,
    seeds: &[u64],
) -> Result<DiagnosticReport> {
    if seeds.is_empty() {
        return Err(Error::Config("no baseline seeds".into()));
    }
    let reports = seeds
        .iter()
        .map(|&s| equivariance_diagnostic(&Encoder::new(config.clone(), s)?, videos, n_probes, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let k = reports.len() as f64;
    let mean = |f: fn(&DiagnosticReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    Ok(DiagnosticReport {
        n_codes: reports[0].n_codes,
        match_accuracy: mean(|r| r.match_accuracy),
        chance: mean(|r| r.chance),
        speed_accuracy: mean(|r| r.speed_accuracy),
        direction_accuracy: mean(|r| r.direction_accuracy),
        overlap_accuracy: mean(|r| r.overlap_accuracy),
    })
}
