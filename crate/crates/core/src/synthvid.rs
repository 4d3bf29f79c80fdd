//! Synthetic videos whose class is defined by motion alone, and the FVC
//! frame-volume container.
//!
//! FVC layout (all integers little-endian):
//!
//! | offset | size          | content                               |
//! |--------|---------------|---------------------------------------|
//! | 0      | 4             | magic `FVC1`                          |
//! | 4      | 20            | `u32` N, T, H, W, C                   |
//! | 24     | 1             | dtype, `0x00` = `u8`                  |
//! | 25     | N·T·H·W·C     | pixels, (video, time, row, col, chan) |
//! | ...    | 2N            | `u16` class labels                    |
//!
//! A file is therefore exactly `25 + N·T·H·W·C + 2N` bytes long.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clipops::{frame_indices, TemporalTransform, VideoTensor};
use crate::error::{Error, Result};

pub const FVC_MAGIC: &[u8; 4] = b"FVC1";
const DTYPE_U8: u8 = 0x00;
pub const FVC_HEADER_LEN: usize = 25;

/// Trajectories times profiles times 8 heading steps.
pub const MAX_CLASSES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    Linear,
    Circular,
    Zigzag,
    Bounce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedProfile {
    Constant,
    Accelerating,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MotionClassSpec {
    pub class_id: u16,
    pub trajectory: Trajectory,
    pub speed_profile: SpeedProfile,
    /// Heading in multiples of 45 degrees, added to the trajectory's base heading.
    pub heading_step: u8,
}

const TRAJECTORIES: [Trajectory; 4] = [
    Trajectory::Linear,
    Trajectory::Circular,
    Trajectory::Zigzag,
    Trajectory::Bounce,
];

impl MotionClassSpec {
    /// Class `id` decomposes as `heading_step * 8 + trajectory * 2 + profile`,
    /// so the first eight classes share the base headings.
    pub fn from_id(id: usize) -> Result<Self> {
        if id >= MAX_CLASSES {
            return Err(Error::Config(format!("class id {id} exceeds {}", MAX_CLASSES - 1)));
        }
        Ok(Self {
            class_id: id as u16,
            trajectory: TRAJECTORIES[(id % 8) / 2],
            speed_profile: if id % 2 == 0 {
                SpeedProfile::Constant
            } else {
                SpeedProfile::Accelerating
            },
            heading_step: (id / 8) as u8,
        })
    }

    fn heading(&self) -> f64 {
        let base = match self.trajectory {
            Trajectory::Linear | Trajectory::Circular | Trajectory::Bounce => 0.0,
            Trajectory::Zigzag => PI / 2.0,
        };
        base + self.heading_step as f64 * PI / 4.0
    }

    /// Displacement from the start position at normalized time `s` in `[0, 1]`.
    pub fn displacement(&self, s: f64, width: usize) -> (f64, f64) {
        let u = match self.speed_profile {
            SpeedProfile::Constant => s,
            SpeedProfile::Accelerating => s * s,
        };
        let len = 1.5 * width as f64;
        let th = self.heading();
        let (along, across) = match self.trajectory {
            Trajectory::Linear => (len * u, 0.0),
            Trajectory::Circular => {
                let r = 7.0;
                let a = 4.0 * PI * u;
                (r * a.sin(), r * (1.0 - a.cos()))
            }
            Trajectory::Zigzag => {
                let phase = (4.0 * u).fract();
                let tri = if phase < 0.5 { 4.0 * phase - 1.0 } else { 3.0 - 4.0 * phase };
                (len * u, 6.0 * (tri + 1.0))
            }
            Trajectory::Bounce => (len * u, -8.0 * (4.0 * PI * u).sin().abs()),
        };
        // image rows grow downwards, so "across" positive is a left turn on screen
        let dx = along * th.cos() + across * th.sin();
        let dy = -along * th.sin() + across * th.cos();
        (dx, dy)
    }
}

pub fn class_catalog(n_classes: usize) -> Result<Vec<MotionClassSpec>> {
    if n_classes == 0 {
        return Err(Error::Config("need at least one class".into()));
    }
    (0..n_classes).map(MotionClassSpec::from_id).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Disc,
    Square,
    Diamond,
    Cross,
}

impl Shape {
    fn sdf(self, dx: f64, dy: f64, r: f64) -> f64 {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            Shape::Disc => (dx * dx + dy * dy).sqrt() - r,
            Shape::Square => ax.max(ay) - 0.85 * r,
            Shape::Diamond => (ax + ay) / 1.2 - r,
            Shape::Cross => (ax - r).max(ay - r / 3.0).min((ax - r / 3.0).max(ay - r)),
        }
    }
}

/// Decoded pixel container: `n` videos of `t x h x w x c` bytes plus labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoSet {
    pub n: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u16>,
}

impl VideoSet {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn video_bytes(&self, i: usize) -> &[u8] {
        let sz = self.t * self.h * self.w * self.c;
        &self.pixels[i * sz..(i + 1) * sz]
    }

    pub fn video(&self, i: usize) -> VideoTensor {
        let frames = Array4::from_shape_vec(
            (self.t, self.h, self.w, self.c),
            self.video_bytes(i).iter().map(|&b| b as f32 / 255.0).collect(),
        )
        .expect("video shape");
        VideoTensor::new(frames).expect("bytes decode into [0, 1]")
    }

    /// Equivalent to `apply_temporal(&self.video(i), tau, clip_len)` without
    /// decoding unused frames.
    pub fn clip(&self, i: usize, tau: &TemporalTransform, clip_len: usize) -> Result<VideoTensor> {
        if !tau.fits(self.t, clip_len) {
            return Err(Error::TransformOutOfRange {
                needed: tau.start_frame + tau.extent(clip_len),
                available: self.t,
            });
        }
        let frame = self.h * self.w * self.c;
        let src = self.video_bytes(i);
        let mut data = Vec::with_capacity(clip_len * frame);
        for f in frame_indices(tau, clip_len) {
            data.extend(src[f * frame..(f + 1) * frame].iter().map(|&b| b as f32 / 255.0));
        }
        let frames = Array4::from_shape_vec((clip_len, self.h, self.w, self.c), data).expect("clip shape");
        Ok(VideoTensor::new(frames).expect("bytes decode into [0, 1]"))
    }

    pub fn subset(&self, idx: &[usize]) -> VideoSet {
        let mut pixels = Vec::with_capacity(idx.len() * self.video_bytes(0).len());
        for &i in idx {
            pixels.extend_from_slice(self.video_bytes(i));
        }
        VideoSet {
            n: idx.len(),
            pixels,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ..*self
        }
    }

    /// Stratified split: within each class, the last `round(fraction * count)`
    /// videos (in file order) form the test set.
    pub fn train_test_split(&self, test_fraction: f64) -> Result<(VideoSet, VideoSet)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let mut by_class: std::collections::BTreeMap<u16, Vec<usize>> = Default::default();
        for (i, &y) in self.labels.iter().enumerate() {
            by_class.entry(y).or_default().push(i);
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for idx in by_class.values() {
            let n_test = (test_fraction * idx.len() as f64).round() as usize;
            let cut = idx.len() - n_test;
            train.extend_from_slice(&idx[..cut]);
            test.extend_from_slice(&idx[cut..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }

    pub fn encoded_len(&self) -> usize {
        FVC_HEADER_LEN + self.pixels.len() + 2 * self.n
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(FVC_MAGIC);
        for v in [self.n, self.t, self.h, self.w, self.c] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(DTYPE_U8);
        out.extend_from_slice(&self.pixels);
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FVC_HEADER_LEN {
            return Err(Error::Fvc(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != FVC_MAGIC {
            return Err(Error::Fvc(format!("bad magic {:?}", &bytes[..4])));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        let (n, t, h, w, c) = (dim(0), dim(1), dim(2), dim(3), dim(4));
        if bytes[24] != DTYPE_U8 {
            return Err(Error::Fvc(format!("unsupported dtype byte {:#04x}", bytes[24])));
        }
        let px = [n, t, h, w, c]
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Fvc("dimensions overflow".into()))?;
        let expected = FVC_HEADER_LEN + px + 2 * n;
        if bytes.len() != expected {
            return Err(Error::Fvc(format!("length {} does not match header (expected {expected})", bytes.len())));
        }
        let pixels = bytes[25..25 + px].to_vec();
        let labels = bytes[25 + px..25 + px + 2 * n]
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        Ok(Self {
            n,
            t,
            h,
            w,
            c,
            pixels,
            labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            n_per_class: 100,
            frames: 128,
            height: 32,
            width: 32,
            channels: 3,
            seed: 0,
        }
    }
}

const MAX_SPRITE_RADIUS: f64 = 3.0;
const GROWTH: f64 = 2.0;

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_classes > MAX_CLASSES {
            return Err(Error::Config(format!("n_classes must be in 1..={MAX_CLASSES}, got {}", self.n_classes)));
        }
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be positive".into()));
        }
        if self.frames < 2 {
            return Err(Error::Config("need at least 2 frames".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        let sprite = 2.0 * MAX_SPRITE_RADIUS * GROWTH + 2.0;
        if (self.height.min(self.width) as f64) < sprite || self.height < 8 || self.width < 8 {
            return Err(Error::Geometry(format!(
                "sprite up to {sprite} px does not fit a {}x{} frame",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Renders `n_classes * n_per_class` videos; video `v` has class `v % n_classes`.
/// Each video draws its appearance from its own stream, so any subset can be
/// regenerated independently.
pub fn generate_dataset(cfg: &GenerateConfig) -> Result<VideoSet> {
    cfg.validate()?;
    let catalog = class_catalog(cfg.n_classes)?;
    let n = cfg.n_classes * cfg.n_per_class;
    let per_video = cfg.frames * cfg.height * cfg.width * cfg.channels;
    let mut pixels = Vec::with_capacity(n * per_video);
    let mut labels = Vec::with_capacity(n);
    for v in 0..n {
        let spec = &catalog[v % cfg.n_classes];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(v as u64);
        render_video(&mut rng, spec, cfg, &mut pixels);
        labels.push(spec.class_id);
    }
    Ok(VideoSet {
        n,
        t: cfg.frames,
        h: cfg.height,
        w: cfg.width,
        c: cfg.channels,
        pixels,
        labels,
    })
}

fn render_video(rng: &mut ChaCha8Rng, spec: &MotionClassSpec, cfg: &GenerateConfig, out: &mut Vec<u8>) {
    let (t, h, w, c) = (cfg.frames, cfg.height, cfg.width, cfg.channels);
    let shape = [Shape::Disc, Shape::Square, Shape::Diamond, Shape::Cross][rng.random_range(0..4)];
    let radius = rng.random_range(2.0..=MAX_SPRITE_RADIUS);
    let color: Vec<f64> = if c == 1 {
        vec![rng.random_range(0.8..1.0)]
    } else {
        let mut col: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..0.5)).collect();
        col[rng.random_range(0..3)] = rng.random_range(0.85..1.0);
        col
    };
    let (x0, y0) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
    // static texture: a coarse random grid upsampled bilinearly
    let g = 5;
    let grid: Vec<f64> = (0..g * g * c).map(|_| rng.random_range(0.1..0.45)).collect();
    let mut background = vec![0.0f64; h * w * c];
    for y in 0..h {
        let gy = y as f64 / (h - 1) as f64 * (g - 1) as f64;
        let (iy, fy) = ((gy.floor() as usize).min(g - 2), gy - (gy.floor()).min((g - 2) as f64));
        for x in 0..w {
            let gx = x as f64 / (w - 1) as f64 * (g - 1) as f64;
            let (ix, fx) = ((gx.floor() as usize).min(g - 2), gx - (gx.floor()).min((g - 2) as f64));
            for ch in 0..c {
                let at = |yy: usize, xx: usize| grid[(yy * g + xx) * c + ch];
                let top = at(iy, ix) * (1.0 - fx) + at(iy, ix + 1) * fx;
                let bot = at(iy + 1, ix) * (1.0 - fx) + at(iy + 1, ix + 1) * fx;
                background[(y * w + x) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let wrap = |d: f64, size: usize| {
        let s = size as f64;
        (d + s / 2.0).rem_euclid(s) - s / 2.0
    };
    for f in 0..t {
        let s = f as f64 / (t - 1) as f64;
        let (dx, dy) = spec.displacement(s, w);
        let (cx, cy) = (x0 + dx, y0 + dy);
        let r = radius * (1.0 + (GROWTH - 1.0) * s);
        for y in 0..h {
            for x in 0..w {
                let ddx = wrap(x as f64 + 0.5 - cx, w);
                let ddy = wrap(y as f64 + 0.5 - cy, h);
                let cover = (0.5 - shape.sdf(ddx, ddy, r)).clamp(0.0, 1.0);
                for ch in 0..c {
                    let bg = background[(y * w + x) * c + ch];
                    let v = bg * (1.0 - cover) + color[ch] * cover;
                    out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
}

pub fn write_fvc(path: &Path, set: &VideoSet) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&set.to_bytes())?;
    f.sync_all()?;
    Ok(())
}

pub fn load_fvc(path: &Path) -> Result<VideoSet> {
    VideoSet::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GenerateConfig {
        GenerateConfig {
            n_classes: 4,
            n_per_class: 2,
            frames: 12,
            height: 16,
            width: 16,
            channels: 3,
            seed,
        }
    }

    #[test]
    fn encoded_length_formula() {
        let set = generate_dataset(&small(0)).unwrap();
        assert_eq!(set.to_bytes().len(), 25 + 8 * 12 * 16 * 16 * 3 + 16);
        let d = GenerateConfig::default();
        let n = d.n_classes * d.n_per_class;
        let pixels = n * d.frames * d.height * d.width * d.channels;
        assert_eq!(pixels + 2 * n, 800 * 128 * 32 * 32 * 3 + 1600);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_dataset(&small(5)).unwrap();
        let b = generate_dataset(&small(5)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = generate_dataset(&small(6)).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn classes_are_balanced() {
        let set = generate_dataset(&small(1)).unwrap();
        for k in 0..4u16 {
            assert_eq!(set.labels.iter().filter(|&&l| l == k).count(), 2);
        }
    }

    #[test]
    fn catalog_triples_are_unique() {
        let all = class_catalog(MAX_CLASSES).unwrap();
        let mut keys: Vec<_> = all.iter().map(|s| (s.trajectory, s.speed_profile, s.heading_step)).collect();
        keys.sort_by_key(|k| format!("{k:?}"));
        keys.dedup();
        assert_eq!(keys.len(), MAX_CLASSES);
        assert!(class_catalog(MAX_CLASSES + 1).is_err());
    }

    #[test]
    fn rejects_bad_files() {
        let bytes = generate_dataset(&small(2)).unwrap().to_bytes();
        assert!(matches!(VideoSet::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Fvc(_))));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(VideoSet::from_bytes(&wrong), Err(Error::Fvc(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(VideoSet::from_bytes(&extra).is_err());
    }

    #[test]
    fn sprite_must_fit() {
        let cfg = GenerateConfig {
            height: 10,
            width: 10,
            ..small(0)
        };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Geometry(_))));
    }

    #[test]
    fn clip_matches_full_decode() {
        use crate::clipops::{apply_temporal, Direction};
        let set = generate_dataset(&small(3)).unwrap();
        let tau = TemporalTransform::new(1, Direction::Reverse, 2);
        let direct = set.clip(1, &tau, 4).unwrap();
        assert_eq!(direct, apply_temporal(&set.video(1), &tau, 4).unwrap());
    }

    #[test]
    fn sprite_moves_between_frames() {
        let set = generate_dataset(&small(4)).unwrap();
        let v = set.video_bytes(0);
        let frame = 16 * 16 * 3;
        assert_ne!(&v[..frame], &v[11 * frame..]);
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn round_trip(n in 0usize..4, t in 1usize..5, h in 1usize..5, w in 1usize..5, c in 1usize..4, seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pixels: Vec<u8> = (0..n * t * h * w * c).map(|_| rng.random()).collect();
                let labels: Vec<u16> = (0..n).map(|_| rng.random()).collect();
                let set = VideoSet { n, t, h, w, c, pixels, labels };
                let bytes = set.to_bytes();
                prop_assert_eq!(bytes.len(), set.encoded_len());
                let back = VideoSet::from_bytes(&bytes).unwrap();
                prop_assert_eq!(&back, &set);
                prop_assert_eq!(back.to_bytes(), bytes);
            }

            #[test]
            fn truncation_is_rejected(cut in 1usize..50) {
                let set = VideoSet { n: 2, t: 2, h: 3, w: 3, c: 1, pixels: vec![7; 36], labels: vec![1, 2] };
                let bytes = set.to_bytes();
                let keep = bytes.len().saturating_sub(cut);
                prop_assert_eq!(VideoSet::from_bytes(&bytes[..keep]).is_err(), true);
            }
        }
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let set = generate_dataset(&GenerateConfig {
            n_classes: 4,
            n_per_class: 5,
            frames: 16,
            height: 16,
            width: 16,
            channels: 1,
            seed: 0,
        })
        .unwrap();
        let (train, test) = set.train_test_split(0.2).unwrap();
        assert_eq!((train.len(), test.len()), (16, 4));
        let mut test_labels = test.labels.clone();
        test_labels.sort_unstable();
        assert_eq!(test_labels, vec![0, 1, 2, 3]);
        assert_eq!(test.video_bytes(0), set.video_bytes(16));
        assert!(set.train_test_split(1.0).is_err());
    }
}
