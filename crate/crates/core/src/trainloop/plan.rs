use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clipops::{
    apply_spatial, overlap_order_label, relative_descriptor, sample_spatial, sample_temporal_transform,
    RelativeTransform, SpatialAugmentation, SpatialConfig, TemporalTransform, TransformSpace,
};
use crate::error::{Error, Result};
use crate::nn::{Scalar, Volume};
use crate::synthvid::VideoSet;

use super::config::{Arm, Equivariance, TrainConfig};

/// Resampling budget for cross-couple descriptor collisions.
pub const MAX_RESAMPLE: usize = 10;

/// Two videos sharing one pair of temporal transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Couple {
    pub videos: (usize, usize),
    pub tau_p: TemporalTransform,
    pub tau_q: TemporalTransform,
    /// One draw per clip: `[i_p, i_q, j_p, j_q]`, or for the distinctive arm
    /// two views of every temporal crop, `[i_p, i_p', i_q, i_q', j_p, j_p', j_q, j_q']`.
    pub spatial: Vec<SpatialAugmentation>,
}

/// Relative spatial transformation of a clip pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpatialRelative {
    pub offset_delta: (i64, i64),
    pub flip_pair: (bool, bool),
}

/// What ψ must recover from a couple's clip pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairDescriptor {
    pub temporal: Option<RelativeTransform>,
    pub spatial: Option<SpatialRelative>,
}

impl Couple {
    pub fn descriptor(&self, equivariance: Equivariance) -> PairDescriptor {
        let (a, b) = (&self.spatial[0], &self.spatial[1]);
        PairDescriptor {
            temporal: equivariance.temporal().then(|| relative_descriptor(&self.tau_p, &self.tau_q)),
            spatial: equivariance.spatial().then(|| SpatialRelative {
                offset_delta: (
                    b.crop_box.0 as i64 - a.crop_box.0 as i64,
                    b.crop_box.1 as i64 - a.crop_box.1 as i64,
                ),
                flip_pair: (a.horizontal_flip, b.horizontal_flip),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub arm: Arm,
    pub equivariance: Equivariance,
    pub couples: Vec<Couple>,
}

impl BatchPlan {
    pub fn n_clips(&self) -> usize {
        self.couples.iter().map(|c| c.spatial.len()).sum()
    }

    /// Number of couples whose descriptor equals an earlier couple's.
    pub fn collisions(&self) -> usize {
        let ds: Vec<_> = self.couples.iter().map(|c| c.descriptor(self.equivariance)).collect();
        (0..ds.len()).filter(|&i| ds[..i].contains(&ds[i])).count()
    }
}

/// Sampling settings for [`plan_batch`].
#[derive(Clone, Debug, PartialEq)]
pub struct PlanConfig {
    pub clip_len: usize,
    pub space: TransformSpace,
    pub spatial: SpatialConfig,
    pub equivariance: Equivariance,
    pub arm: Arm,
}

impl PlanConfig {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        Self {
            clip_len: cfg.clip_len,
            space: cfg.transform_space(),
            spatial: cfg.spatial_config(),
            equivariance: cfg.equivariance,
            arm: cfg.arm,
        }
    }
}

/// Randomly pairs `videos` into couples and draws their transforms.
///
/// `lens[k]` is the frame count of `videos[k]`; `frame_hw` the source frame
/// size. Each couple's temporal pair must fit the shorter member.
pub fn plan_batch<R: Rng + ?Sized>(
    rng: &mut R,
    videos: &[usize],
    lens: &[usize],
    frame_hw: (usize, usize),
    cfg: &PlanConfig,
) -> Result<BatchPlan> {
    if videos.len() % 2 != 0 || videos.len() < 4 {
        return Err(Error::MalformedBatchPlan(format!(
            "batch of {} videos; need an even number of at least 4",
            videos.len()
        )));
    }
    if lens.len() != videos.len() {
        return Err(Error::Shape(format!("{} lengths for {} videos", lens.len(), videos.len())));
    }
    let mut order: Vec<usize> = (0..videos.len()).collect();
    order.shuffle(rng);
    let mut couples: Vec<Couple> = Vec::with_capacity(videos.len() / 2);
    let mut seen: Vec<PairDescriptor> = Vec::new();
    for pair in order.chunks_exact(2) {
        let (a, b) = (pair[0], pair[1]);
        let len = lens[a].min(lens[b]);
        let mut couple = draw_couple(rng, (videos[a], videos[b]), len, frame_hw, cfg)?;
        if cfg.arm == Arm::Equivariant {
            for _ in 0..MAX_RESAMPLE {
                if !seen.contains(&couple.descriptor(cfg.equivariance)) {
                    break;
                }
                couple = draw_couple(rng, (videos[a], videos[b]), len, frame_hw, cfg)?;
            }
            seen.push(couple.descriptor(cfg.equivariance));
        }
        couples.push(couple);
    }
    Ok(BatchPlan {
        arm: cfg.arm,
        equivariance: cfg.equivariance,
        couples,
    })
}

fn draw_couple<R: Rng + ?Sized>(
    rng: &mut R,
    videos: (usize, usize),
    video_len: usize,
    (h, w): (usize, usize),
    cfg: &PlanConfig,
) -> Result<Couple> {
    let tau_p = sample_temporal_transform(rng, video_len, cfg.clip_len, &cfg.space)?;
    // spatial-only equivariance keeps the temporal crop fixed within the pair
    let tau_q = if cfg.equivariance == Equivariance::Spatial {
        tau_p
    } else {
        sample_temporal_transform(rng, video_len, cfg.clip_len, &cfg.space)?
    };
    let n_views = if cfg.arm == Arm::Distinctive { 8 } else { 4 };
    let mut spatial: Vec<SpatialAugmentation> = (0..n_views).map(|_| sample_spatial(rng, h, w, &cfg.spatial)).collect();
    if cfg.equivariance.spatial() {
        // both videos share the geometric part of each slot; jitter stays per clip
        for slot in 0..2 {
            let src = spatial[slot];
            spatial[2 + slot].crop_box = src.crop_box;
            spatial[2 + slot].horizontal_flip = src.horizontal_flip;
        }
    }
    Ok(Couple {
        videos,
        tau_p,
        tau_q,
        spatial,
    })
}

/// Index structure of a materialized batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLayout {
    /// `(p clip, q clip)` rows feeding ψ and the overlap head.
    pub pairs: Vec<(usize, usize)>,
    /// Couple index of every pair.
    pub pair_groups: Vec<usize>,
    /// Instance id of every clip.
    pub instance_ids: Vec<u64>,
    pub speed_labels: Vec<usize>,
    pub direction_labels: Vec<usize>,
    /// Overlap/order label of every pair.
    pub overlap_labels: Vec<usize>,
    /// Source video of every clip.
    pub clip_videos: Vec<usize>,
}

impl BatchLayout {
    pub fn from_plan(plan: &BatchPlan, clip_len: usize) -> Self {
        let mut l = BatchLayout {
            pairs: Vec::new(),
            pair_groups: Vec::new(),
            instance_ids: Vec::new(),
            speed_labels: Vec::new(),
            direction_labels: Vec::new(),
            overlap_labels: Vec::new(),
            clip_videos: Vec::new(),
        };
        for (ci, c) in plan.couples.iter().enumerate() {
            let order = overlap_order_label(&c.tau_p, &c.tau_q, clip_len).label();
            for v in [c.videos.0, c.videos.1] {
                let base = l.clip_videos.len();
                match plan.arm {
                    Arm::Equivariant => {
                        for tau in [c.tau_p, c.tau_q] {
                            l.clip_videos.push(v);
                            l.instance_ids.push(v as u64);
                            l.speed_labels.push(tau.speed_exponent as usize);
                            l.direction_labels.push(tau.direction.label());
                        }
                        l.pairs.push((base, base + 1));
                        l.pair_groups.push(ci);
                        l.overlap_labels.push(order);
                    }
                    Arm::Distinctive => {
                        for (slot, tau) in [c.tau_p, c.tau_p, c.tau_q, c.tau_q].iter().enumerate() {
                            l.clip_videos.push(v);
                            l.instance_ids.push(2 * v as u64 + (slot / 2) as u64);
                            l.speed_labels.push(tau.speed_exponent as usize);
                            l.direction_labels.push(tau.direction.label());
                        }
                    }
                }
            }
        }
        l
    }
}

/// Clips plus everything the objectives need to consume them.
#[derive(Clone, Debug)]
pub struct Batch<F> {
    pub step: u64,
    pub plan: BatchPlan,
    pub layout: BatchLayout,
    pub clips: Volume<F>,
}

/// Temporal transform of each clip, in layout order.
fn clip_transforms(plan: &BatchPlan) -> Vec<TemporalTransform> {
    let mut out = Vec::with_capacity(plan.n_clips());
    for c in &plan.couples {
        for _ in 0..2 {
            match plan.arm {
                Arm::Equivariant => out.extend([c.tau_p, c.tau_q]),
                Arm::Distinctive => out.extend([c.tau_p, c.tau_p, c.tau_q, c.tau_q]),
            }
        }
    }
    out
}

/// Renders every clip of `plan` at `resolution x resolution`.
pub fn materialize<F: Scalar>(step: u64, plan: BatchPlan, data: &VideoSet, clip_len: usize, resolution: usize) -> Result<Batch<F>> {
    let layout = BatchLayout::from_plan(&plan, clip_len);
    let taus = clip_transforms(&plan);
    let sigmas: Vec<SpatialAugmentation> = plan.couples.iter().flat_map(|c| c.spatial.iter().copied()).collect();
    let n = layout.clip_videos.len();
    let per_clip = clip_len * resolution * resolution * data.c;
    let mut buf = Vec::with_capacity(n * per_clip);
    for k in 0..n {
        let raw = data.clip(layout.clip_videos[k], &taus[k], clip_len)?;
        let aug = apply_spatial(&raw, &sigmas[k], resolution, resolution)?;
        buf.extend(aug.frames().iter().map(|&v| F::from_f64(v as f64)));
    }
    Ok(Batch {
        step,
        plan,
        layout,
        clips: Volume::from_vec(buf, [n, clip_len, resolution, resolution, data.c]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(eq: Equivariance, arm: Arm) -> PlanConfig {
        PlanConfig {
            clip_len: 16,
            space: TransformSpace::default(),
            spatial: SpatialConfig::default(),
            equivariance: eq,
            arm,
        }
    }

    #[test]
    fn batch_of_eight_gives_four_couples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let videos: Vec<usize> = (10..18).collect();
        let plan = plan_batch(&mut rng, &videos, &[128; 8], (32, 32), &cfg(Equivariance::Temporal, Arm::Equivariant)).unwrap();
        assert_eq!(plan.couples.len(), 4);
        assert_eq!(plan.n_clips(), 16);
        let mut used: Vec<usize> = plan.couples.iter().flat_map(|c| [c.videos.0, c.videos.1]).collect();
        used.sort_unstable();
        assert_eq!(used, videos);
        let layout = BatchLayout::from_plan(&plan, 16);
        assert_eq!(layout.pairs.len(), 8);
        assert_eq!(layout.instance_ids.len(), 16);
    }

    #[test]
    fn odd_or_tiny_batches_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = cfg(Equivariance::Temporal, Arm::Equivariant);
        assert!(matches!(plan_batch(&mut rng, &[0, 1, 2], &[128; 3], (32, 32), &c), Err(Error::MalformedBatchPlan(_))));
        assert!(plan_batch(&mut rng, &[0, 1], &[128; 2], (32, 32), &c).is_err());
        assert!(matches!(
            plan_batch(&mut rng, &[0, 1, 2, 3], &[128, 128, 10, 128], (32, 32), &c),
            Err(Error::VideoTooShort { .. })
        ));
    }

    #[test]
    fn shorter_member_bounds_the_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cfg(Equivariance::Temporal, Arm::Equivariant);
        for _ in 0..50 {
            let plan = plan_batch(&mut rng, &[0, 1, 2, 3], &[128, 40, 40, 128], (32, 32), &c).unwrap();
            for cp in &plan.couples {
                assert!(cp.tau_p.fits(40, 16) || cp.videos.0 % 3 == 0 && cp.videos.1 % 3 == 0);
                assert!(cp.tau_q.fits(40, 16) || cp.videos.0 % 3 == 0 && cp.videos.1 % 3 == 0);
            }
        }
    }

    #[test]
    fn spatial_equivariance_shares_geometry_and_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let plan = plan_batch(&mut rng, &[0, 1, 2, 3], &[128; 4], (32, 32), &cfg(Equivariance::Spatial, Arm::Equivariant)).unwrap();
        for c in &plan.couples {
            assert_eq!(c.tau_p, c.tau_q);
            for slot in 0..2 {
                assert_eq!(c.spatial[slot].crop_box, c.spatial[2 + slot].crop_box);
                assert_eq!(c.spatial[slot].horizontal_flip, c.spatial[2 + slot].horizontal_flip);
            }
        }
    }

    #[test]
    fn distinctive_layout_has_four_clips_per_video() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = plan_batch(&mut rng, &[0, 1, 2, 3], &[128; 4], (32, 32), &cfg(Equivariance::Temporal, Arm::Distinctive)).unwrap();
        let l = BatchLayout::from_plan(&plan, 16);
        assert_eq!(l.instance_ids.len(), 16);
        assert!(l.pairs.is_empty());
        for k in 0..8 {
            assert_eq!(l.instance_ids[2 * k], l.instance_ids[2 * k + 1]);
        }
        let mut ids = l.instance_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 8);
    }
}
