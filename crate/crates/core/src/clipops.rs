//! Temporal transformation algebra and clip-consistent spatial augmentation.
//!
//! A temporal transform is the canonical triple `(speed, direction, start)`:
//! the clip samples `clip_len` frames with stride `2^speed` starting at
//! `start`, and reversal walks that same strided index set backwards.

use ndarray::{Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported speed exponent (8x playback).
pub const MAX_SPEED_EXPONENT: u8 = 3;

/// A clip or video as `(time, height, width, channels)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    frames: Array4<f32>,
}

impl VideoTensor {
    pub fn new(frames: Array4<f32>) -> Result<Self> {
        let (t, h, w, c) = frames.dim();
        if t < 1 {
            return Err(Error::InvalidVideo("no frames".into()));
        }
        if h < 8 || w < 8 {
            return Err(Error::InvalidVideo(format!("frame {h}x{w} smaller than 8x8")));
        }
        if c != 1 && c != 3 {
            return Err(Error::InvalidVideo(format!("{c} channels")));
        }
        if frames.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidVideo("values must be finite and within [0, 1]".into()));
        }
        Ok(Self { frames })
    }

    /// Wraps frames already known to satisfy the invariants.
    pub(crate) fn from_trusted(frames: Array4<f32>) -> Self {
        debug_assert!(frames.iter().all(|v| (0.0..=1.0).contains(v)));
        Self { frames }
    }

    pub fn frames(&self) -> &Array4<f32> {
        &self.frames
    }

    pub fn into_frames(self) -> Array4<f32> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(height, width, channels)`.
    pub fn frame_dims(&self) -> (usize, usize, usize) {
        let (_, h, w, c) = self.frames.dim();
        (h, w, c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Reverse,
}

impl Direction {
    pub fn label(self) -> usize {
        match self {
            Direction::Forward => 0,
            Direction::Reverse => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemporalTransform {
    /// Playback factor is `2^speed_exponent`.
    pub speed_exponent: u8,
    pub direction: Direction,
    pub start_frame: usize,
}

impl TemporalTransform {
    pub fn new(speed_exponent: u8, direction: Direction, start_frame: usize) -> Self {
        Self {
            speed_exponent,
            direction,
            start_frame,
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.speed_exponent
    }

    /// Number of source frames the clip spans.
    pub fn extent(&self, clip_len: usize) -> usize {
        clip_len << self.speed_exponent
    }

    /// Source-frame interval `[start, start + extent)`.
    pub fn span(&self, clip_len: usize) -> (usize, usize) {
        (self.start_frame, self.start_frame + self.extent(clip_len))
    }

    pub fn fits(&self, video_len: usize, clip_len: usize) -> bool {
        self.start_frame + self.extent(clip_len) <= video_len
    }
}

/// Source frame index of every clip frame.
pub fn frame_indices(tau: &TemporalTransform, clip_len: usize) -> Vec<usize> {
    let s = tau.stride();
    let mut idx: Vec<usize> = (0..clip_len).map(|i| tau.start_frame + i * s).collect();
    if tau.direction == Direction::Reverse {
        idx.reverse();
    }
    idx
}

pub fn apply_temporal(video: &VideoTensor, tau: &TemporalTransform, clip_len: usize) -> Result<VideoTensor> {
    if clip_len == 0 {
        return Err(Error::Config("clip_len must be positive".into()));
    }
    if !tau.fits(video.len(), clip_len) {
        return Err(Error::TransformOutOfRange {
            needed: tau.start_frame + tau.extent(clip_len),
            available: video.len(),
        });
    }
    let idx = frame_indices(tau, clip_len);
    Ok(VideoTensor::from_trusted(video.frames.select(Axis(0), &idx)))
}

/// Which transforms the sampler may draw.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformSpace {
    pub speeds: Vec<u8>,
    pub allow_reverse: bool,
}

impl Default for TransformSpace {
    fn default() -> Self {
        Self {
            speeds: vec![0, 1, 2, 3],
            allow_reverse: true,
        }
    }
}

impl TransformSpace {
    pub fn validate(&self) -> Result<()> {
        if self.speeds.is_empty() {
            return Err(Error::Config("at least one speed exponent is required".into()));
        }
        if let Some(k) = self.speeds.iter().find(|&&k| k > MAX_SPEED_EXPONENT) {
            return Err(Error::Config(format!("speed exponent {k} exceeds {MAX_SPEED_EXPONENT}")));
        }
        Ok(())
    }

    /// Allowed speeds whose extent fits a video of `video_len` frames.
    pub fn feasible_speeds(&self, video_len: usize, clip_len: usize) -> Vec<u8> {
        let mut ks: Vec<u8> = self
            .speeds
            .iter()
            .copied()
            .filter(|&k| k <= MAX_SPEED_EXPONENT && (clip_len << k) <= video_len)
            .collect();
        ks.sort_unstable();
        ks.dedup();
        ks
    }
}

/// Uniform speed over the feasible set, uniform direction, uniform start.
pub fn sample_temporal_transform<R: Rng + ?Sized>(
    rng: &mut R,
    video_len: usize,
    clip_len: usize,
    space: &TransformSpace,
) -> Result<TemporalTransform> {
    let ks = space.feasible_speeds(video_len, clip_len);
    if clip_len == 0 || ks.is_empty() {
        return Err(Error::VideoTooShort { video_len, clip_len });
    }
    let k = ks[rng.random_range(0..ks.len())];
    let direction = if space.allow_reverse && rng.random_bool(0.5) {
        Direction::Reverse
    } else {
        Direction::Forward
    };
    let extent = clip_len << k;
    let start = rng.random_range(0..=video_len - extent);
    Ok(TemporalTransform::new(k, direction, start))
}

/// Content-free descriptor of the ordered pair `(tau_p, tau_q)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelativeTransform {
    pub speed_pair: (u8, u8),
    pub direction_pair: (Direction, Direction),
    /// `start_q - start_p` in source frames.
    pub delta_start: i64,
}

pub fn relative_descriptor(tau_p: &TemporalTransform, tau_q: &TemporalTransform) -> RelativeTransform {
    RelativeTransform {
        speed_pair: (tau_p.speed_exponent, tau_q.speed_exponent),
        direction_pair: (tau_p.direction, tau_q.direction),
        delta_start: tau_q.start_frame as i64 - tau_p.start_frame as i64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapOrder {
    PBeforeQ,
    Overlapping,
    PAfterQ,
}

impl OverlapOrder {
    pub fn label(self) -> usize {
        match self {
            OverlapOrder::PBeforeQ => 0,
            OverlapOrder::Overlapping => 1,
            OverlapOrder::PAfterQ => 2,
        }
    }

    pub fn swapped(self) -> Self {
        match self {
            OverlapOrder::PBeforeQ => OverlapOrder::PAfterQ,
            OverlapOrder::Overlapping => OverlapOrder::Overlapping,
            OverlapOrder::PAfterQ => OverlapOrder::PBeforeQ,
        }
    }
}

/// Classifies the source-frame extents of the two clips.
pub fn overlap_order_label(tau_p: &TemporalTransform, tau_q: &TemporalTransform, clip_len: usize) -> OverlapOrder {
    let (p0, p1) = tau_p.span(clip_len);
    let (q0, q1) = tau_q.span(clip_len);
    if p1 <= q0 {
        OverlapOrder::PBeforeQ
    } else if q1 <= p0 {
        OverlapOrder::PAfterQ
    } else {
        OverlapOrder::Overlapping
    }
}

/// One draw from the spatial augmentation set, shared by every frame of a clip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialAugmentation {
    /// `(top, left, height, width)` in source pixels.
    pub crop_box: (usize, usize, usize, usize),
    pub horizontal_flip: bool,
    /// Additive, within `[-0.2, 0.2]`.
    pub brightness_shift: f32,
    /// Multiplicative around mid-gray, within `[0.8, 1.25]`.
    pub contrast_scale: f32,
}

impl SpatialAugmentation {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            crop_box: (0, 0, height, width),
            horizontal_flip: false,
            brightness_shift: 0.0,
            contrast_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialConfig {
    /// Smallest crop side as a fraction of the shorter frame side.
    pub min_crop_fraction: f64,
    pub allow_flip: bool,
    pub max_brightness: f64,
    pub max_contrast: f64,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self {
            min_crop_fraction: 0.7,
            allow_flip: true,
            max_brightness: 0.2,
            max_contrast: 1.25,
        }
    }
}

/// Random square crop, coin-flip mirror, uniform brightness and log-uniform contrast.
pub fn sample_spatial<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, cfg: &SpatialConfig) -> SpatialAugmentation {
    let short = height.min(width);
    let min_side = ((short as f64 * cfg.min_crop_fraction).ceil() as usize).clamp(1, short);
    let side = rng.random_range(min_side..=short);
    let top = rng.random_range(0..=height - side);
    let left = rng.random_range(0..=width - side);
    let horizontal_flip = cfg.allow_flip && rng.random_bool(0.5);
    let b = cfg.max_brightness.clamp(0.0, 0.2);
    let brightness_shift = if b > 0.0 { rng.random_range(-b..=b) as f32 } else { 0.0 };
    let lc = cfg.max_contrast.clamp(1.0, 1.25).ln();
    let contrast_scale = if lc > 0.0 { rng.random_range(-lc..=lc).exp() as f32 } else { 1.0 };
    SpatialAugmentation {
        crop_box: (top, left, side, side),
        horizontal_flip,
        brightness_shift,
        contrast_scale,
    }
}

/// Crops, resizes (bilinear, pixel-center aligned) to `out_h x out_w`,
/// mirrors and jitters every frame identically, then clamps to `[0, 1]`.
pub fn apply_spatial(video: &VideoTensor, sigma: &SpatialAugmentation, out_h: usize, out_w: usize) -> Result<VideoTensor> {
    let (t, h, w, c) = video.frames.dim();
    let (top, left, bh, bw) = sigma.crop_box;
    if bh == 0 || bw == 0 || top + bh > h || left + bw > w {
        return Err(Error::InvalidCrop {
            box_: sigma.crop_box,
            height: h,
            width: w,
        });
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("output resolution must be positive".into()));
    }
    let src = video.frames.as_slice().expect("standard layout");
    let mut out = vec![0.0f32; t * out_h * out_w * c];
    let taps_y = resize_taps(bh, out_h, top, h);
    let mut taps_x = resize_taps(bw, out_w, left, w);
    if sigma.horizontal_flip {
        taps_x.reverse();
    }
    let (cs, bs) = (sigma.contrast_scale, sigma.brightness_shift);
    // (v - 0.5) * cs + 0.5 + bs, arranged so the identity is exact
    let offset = 0.5 - 0.5 * cs + bs;
    for f in 0..t {
        let frame = &src[f * h * w * c..(f + 1) * h * w * c];
        let dst = &mut out[f * out_h * out_w * c..(f + 1) * out_h * out_w * c];
        for (oy, &(y0, y1, wy)) in taps_y.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in taps_x.iter().enumerate() {
                for ch in 0..c {
                    let px = |y: usize, x: usize| frame[(y * w + x) * c + ch];
                    let top_row = px(y0, x0) * (1.0 - wx) + px(y0, x1) * wx;
                    let bot_row = px(y1, x0) * (1.0 - wx) + px(y1, x1) * wx;
                    let v = top_row * (1.0 - wy) + bot_row * wy;
                    dst[(oy * out_w + ox) * c + ch] = (v * cs + offset).clamp(0.0, 1.0);
                }
            }
        }
    }
    let frames = Array4::from_shape_vec((t, out_h, out_w, c), out).expect("shape matches buffer");
    Ok(VideoTensor::from_trusted(frames))
}

/// Bilinear source taps `(i0, i1, weight_of_i1)` for each output coordinate.
fn resize_taps(src_len: usize, out_len: usize, offset: usize, limit: usize) -> Vec<(usize, usize, f32)> {
    let scale = src_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            let frac = (pos - i0 as f64) as f32;
            ((offset + i0).min(limit - 1), (offset + i1).min(limit - 1), frac)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp_video(t: usize, h: usize, w: usize) -> VideoTensor {
        let frames = Array4::from_shape_fn((t, h, w, 3), |(f, y, x, c)| {
            ((f * 31 + y * 7 + x * 3 + c) % 97) as f32 / 96.0 * 0.8 + 0.1
        });
        VideoTensor::new(frames).unwrap()
    }

    #[test]
    fn frame_indices_examples() {
        let fwd = TemporalTransform::new(1, Direction::Forward, 10);
        let want: Vec<usize> = (0..16).map(|i| 10 + 2 * i).collect();
        assert_eq!(frame_indices(&fwd, 16), want);
        assert_eq!(*want.last().unwrap(), 40);
        assert_eq!(frame_indices(&TemporalTransform::new(0, Direction::Forward, 0), 4), vec![0, 1, 2, 3]);
        assert_eq!(frame_indices(&TemporalTransform::new(0, Direction::Reverse, 0), 4), vec![3, 2, 1, 0]);
    }

    #[test]
    fn apply_temporal_gathers_strided_frames() {
        let v = ramp_video(64, 8, 8);
        let tau = TemporalTransform::new(2, Direction::Forward, 0);
        let clip = apply_temporal(&v, &tau, 16).unwrap();
        assert_eq!(clip.len(), 16);
        for (i, src) in (0..64).step_by(4).enumerate() {
            assert_eq!(clip.frames().index_axis(Axis(0), i), v.frames().index_axis(Axis(0), src));
        }
    }

    #[test]
    fn reversal_is_an_involution_at_full_length() {
        let v = ramp_video(12, 8, 8);
        let tau = TemporalTransform::new(0, Direction::Reverse, 0);
        let once = apply_temporal(&v, &tau, 12).unwrap();
        assert_ne!(once, v);
        assert_eq!(apply_temporal(&once, &tau, 12).unwrap(), v);
    }

    #[test]
    fn out_of_range_transform_is_rejected() {
        let v = ramp_video(16, 8, 8);
        let err = apply_temporal(&v, &TemporalTransform::new(3, Direction::Forward, 0), 16).unwrap_err();
        assert!(err.to_string().contains("transform exceeds video length"));
    }

    #[test]
    fn sampler_single_feasible_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let space = TransformSpace {
            speeds: vec![0],
            allow_reverse: false,
        };
        for _ in 0..20 {
            let tau = sample_temporal_transform(&mut rng, 16, 16, &space).unwrap();
            assert_eq!(tau, TemporalTransform::new(0, Direction::Forward, 0));
        }
    }

    #[test]
    fn sampler_rejects_short_video() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let space = TransformSpace {
            speeds: vec![1, 2, 3],
            allow_reverse: true,
        };
        let err = sample_temporal_transform(&mut rng, 20, 16, &space).unwrap_err();
        assert!(err.to_string().contains("video too short"));
    }

    #[test]
    fn relative_descriptor_examples() {
        let p = TemporalTransform::new(0, Direction::Forward, 4);
        let q = TemporalTransform::new(0, Direction::Forward, 24);
        let r = relative_descriptor(&p, &q);
        assert_eq!(r.speed_pair, (0, 0));
        assert_eq!(r.direction_pair, (Direction::Forward, Direction::Forward));
        assert_eq!(r.delta_start, 20);
        assert_eq!(relative_descriptor(&p, &p).delta_start, 0);
        let back = relative_descriptor(&q, &p);
        assert_eq!(back.delta_start, -20);
    }

    #[test]
    fn overlap_examples() {
        let a = TemporalTransform::new(0, Direction::Forward, 0);
        let b = TemporalTransform::new(0, Direction::Forward, 20);
        assert_eq!(overlap_order_label(&a, &b, 16), OverlapOrder::PBeforeQ);
        assert_eq!(overlap_order_label(&b, &a, 16), OverlapOrder::PAfterQ);
        let c = TemporalTransform::new(1, Direction::Forward, 0);
        let d = TemporalTransform::new(1, Direction::Reverse, 16);
        assert_eq!(overlap_order_label(&c, &d, 16), OverlapOrder::Overlapping);
        // touching intervals do not overlap
        let e = TemporalTransform::new(0, Direction::Forward, 16);
        assert_eq!(overlap_order_label(&a, &e, 16), OverlapOrder::PBeforeQ);
    }

    #[test]
    fn identity_spatial_is_exact() {
        let v = ramp_video(3, 16, 16);
        let out = apply_spatial(&v, &SpatialAugmentation::identity(16, 16), 16, 16).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn double_flip_restores() {
        let v = ramp_video(2, 12, 10);
        let mut s = SpatialAugmentation::identity(12, 10);
        s.horizontal_flip = true;
        let once = apply_spatial(&v, &s, 12, 10).unwrap();
        assert_ne!(once, v);
        assert_eq!(apply_spatial(&once, &s, 12, 10).unwrap(), v);
    }

    #[test]
    fn brightness_inverse_restores() {
        let v = ramp_video(2, 8, 8);
        let mut s = SpatialAugmentation::identity(8, 8);
        s.brightness_shift = 0.05;
        let up = apply_spatial(&v, &s, 8, 8).unwrap();
        s.brightness_shift = -0.05;
        let back = apply_spatial(&up, &s, 8, 8).unwrap();
        for (a, b) in back.frames().iter().zip(v.frames()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn invalid_crop_is_rejected() {
        let v = ramp_video(2, 8, 8);
        let mut s = SpatialAugmentation::identity(8, 8);
        s.crop_box = (4, 0, 8, 8);
        assert!(matches!(apply_spatial(&v, &s, 8, 8), Err(Error::InvalidCrop { .. })));
    }

    #[test]
    fn spatial_jitter_is_temporally_consistent() {
        // a static video must stay static after augmentation
        let frame = Array4::from_shape_fn((1, 16, 16, 3), |(_, y, x, c)| ((y * 5 + x * 3 + c) % 17) as f32 / 16.0);
        let stat = frame.broadcast((6, 16, 16, 3)).unwrap().to_owned();
        let v = VideoTensor::new(stat).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = sample_spatial(&mut rng, 16, 16, &SpatialConfig::default());
        let out = apply_spatial(&v, &s, 16, 16).unwrap();
        let f0 = out.frames().index_axis(Axis(0), 0).to_owned();
        for f in 1..6 {
            assert_eq!(out.frames().index_axis(Axis(0), f), f0);
        }
    }

    #[test]
    fn video_tensor_validation() {
        assert!(VideoTensor::new(Array4::zeros((0, 8, 8, 3))).is_err());
        assert!(VideoTensor::new(Array4::zeros((1, 4, 8, 3))).is_err());
        assert!(VideoTensor::new(Array4::zeros((1, 8, 8, 2))).is_err());
        assert!(VideoTensor::new(Array4::from_elem((1, 8, 8, 1), 1.5)).is_err());
        assert!(VideoTensor::new(Array4::from_elem((1, 8, 8, 1), f32::NAN)).is_err());
        assert!(VideoTensor::new(Array4::from_elem((1, 8, 8, 1), 0.5)).is_ok());
    }

    #[test]
    fn start_frames_are_uniform_per_speed() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let space = TransformSpace::default();
        let mut counts: Vec<Vec<u64>> = (0..4).map(|k| vec![0; 128 - (16 << k) + 1]).collect();
        for _ in 0..10_000 {
            let tau = sample_temporal_transform(&mut rng, 128, 16, &space).unwrap();
            counts[tau.speed_exponent as usize][tau.start_frame] += 1;
        }
        for bins in counts {
            let n: u64 = bins.iter().sum();
            let expected = n as f64 / bins.len() as f64;
            if bins.len() == 1 {
                continue;
            }
            let stat: f64 = bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
            let p = 1.0 - ChiSquared::new((bins.len() - 1) as f64).unwrap().cdf(stat);
            assert!(p > 0.01, "{} bins: chi2 {stat}, p {p}", bins.len());
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_oneof, proptest, Just, Strategy};

        fn direction() -> impl Strategy<Value = Direction> {
            prop_oneof![Just(Direction::Forward), Just(Direction::Reverse)]
        }

        proptest! {
            #[test]
            fn indices_are_strided_and_monotone(k in 0u8..=3, d in direction(), start in 0usize..200, len in 1usize..40) {
                let tau = TemporalTransform::new(k, d, start);
                let idx = frame_indices(&tau, len);
                prop_assert_eq!(idx.len(), len);
                let (lo, hi) = tau.span(len);
                prop_assert!(idx.iter().all(|&i| i >= lo && i < hi));
                for w in idx.windows(2) {
                    let step = w[1] as i64 - w[0] as i64;
                    let want = (1i64 << k) * if d == Direction::Forward { 1 } else { -1 };
                    prop_assert_eq!(step, want);
                }
            }

            #[test]
            fn reversal_is_involutive(t in 1usize..12, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let frames = Array4::from_shape_fn((t, 8, 8, 1), |_| rng.random::<f32>());
                let v = VideoTensor::new(frames).unwrap();
                let rev = TemporalTransform::new(0, Direction::Reverse, 0);
                let twice = apply_temporal(&apply_temporal(&v, &rev, t).unwrap(), &rev, t).unwrap();
                prop_assert_eq!(twice, v);
            }

            #[test]
            fn overlap_is_antisymmetric(kp in 0u8..=3, kq in 0u8..=3, sp in 0usize..100, sq in 0usize..100, len in 1usize..20) {
                let p = TemporalTransform::new(kp, Direction::Forward, sp);
                let q = TemporalTransform::new(kq, Direction::Reverse, sq);
                prop_assert_eq!(overlap_order_label(&q, &p, len), overlap_order_label(&p, &q, len).swapped());
            }

            #[test]
            fn swapped_descriptor_negates_delta(kp in 0u8..=3, kq in 0u8..=3, dp in direction(), dq in direction(), sp in 0usize..500, sq in 0usize..500) {
                let p = TemporalTransform::new(kp, dp, sp);
                let q = TemporalTransform::new(kq, dq, sq);
                let a = relative_descriptor(&p, &q);
                let b = relative_descriptor(&q, &p);
                prop_assert_eq!(b.delta_start, -a.delta_start);
                prop_assert_eq!(b.speed_pair, (a.speed_pair.1, a.speed_pair.0));
                prop_assert_eq!(b.direction_pair, (a.direction_pair.1, a.direction_pair.0));
            }

            #[test]
            fn sampled_transforms_fit(video_len in 8usize..300, clip_len in 1usize..40, mask in 1u8..16, rev in any::<bool>(), seed in any::<u64>()) {
                let space = TransformSpace {
                    speeds: (0..4).filter(|k| mask & (1 << k) != 0).collect(),
                    allow_reverse: rev,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                match sample_temporal_transform(&mut rng, video_len, clip_len, &space) {
                    Ok(tau) => {
                        prop_assert!(tau.fits(video_len, clip_len));
                        prop_assert!(space.speeds.contains(&tau.speed_exponent));
                        prop_assert!(rev || tau.direction == Direction::Forward);
                    }
                    Err(Error::VideoTooShort { .. }) => {
                        prop_assert!(space.feasible_speeds(video_len, clip_len).is_empty());
                    }
                    Err(e) => prop_assert!(false, "unexpected error {e}"),
                }
            }
        }
    }
}
