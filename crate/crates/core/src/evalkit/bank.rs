use std::path::Path;
use std::thread;

use ndarray::{Array1, Array2, Axis};

use crate::clipops::{apply_spatial, Direction, SpatialAugmentation, TemporalTransform};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::nn::{Archive, Volume};
use crate::synthvid::VideoSet;

/// Multi-crop settings for feature extraction.
#[derive(Clone, Debug, PartialEq)]
pub struct CropConfig {
    pub n_temporal: usize,
    /// 1 (center) or 5 (center and four corners).
    pub n_spatial: usize,
    pub speed_exponent: u8,
    /// Side of the spatial crops relative to the frame.
    pub crop_fraction: f64,
    /// Clips per forward pass.
    pub chunk: usize,
    pub threads: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            n_temporal: 4,
            n_spatial: 1,
            speed_exponent: 2,
            crop_fraction: 0.875,
            chunk: 32,
            threads: 1,
        }
    }
}

/// Evenly spaced forward crops covering the video.
pub fn temporal_crops(video_len: usize, clip_len: usize, n: usize, speed_exponent: u8) -> Result<Vec<TemporalTransform>> {
    let extent = clip_len << speed_exponent;
    if n == 0 {
        return Err(Error::Config("no temporal crops".into()));
    }
    if extent > video_len {
        return Err(Error::TransformOutOfRange {
            needed: extent,
            available: video_len,
        });
    }
    let room = video_len - extent;
    Ok((0..n)
        .map(|i| {
            let start = if n == 1 { room / 2 } else { (i * room + (n - 1) / 2) / (n - 1) };
            TemporalTransform::new(speed_exponent, Direction::Forward, start)
        })
        .collect())
}

/// Deterministic crops: the center, then the four corners.
pub fn spatial_crops(height: usize, width: usize, n: usize, fraction: f64) -> Result<Vec<SpatialAugmentation>> {
    if n != 1 && n != 5 {
        return Err(Error::Config(format!("{n} spatial crops; use 1 or 5")));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("crop fraction {fraction}")));
    }
    let ch = ((height as f64 * fraction).round() as usize).max(1);
    let cw = ((width as f64 * fraction).round() as usize).max(1);
    let corners = [
        ((height - ch) / 2, (width - cw) / 2),
        (0, 0),
        (0, width - cw),
        (height - ch, 0),
        (height - ch, width - cw),
    ];
    Ok(corners[..n]
        .iter()
        .map(|&(y, x)| SpatialAugmentation {
            crop_box: (y, x, ch, cw),
            ..SpatialAugmentation::identity(height, width)
        })
        .collect())
}

/// Eval-mode embeddings of a clip volume, computed `chunk` clips at a time.
pub fn embed_clips(model: &mut Encoder<f32>, clips: &Volume<f32>, chunk: usize) -> Result<Array2<f64>> {
    model.check_clips(clips)?;
    let n = clips.batch();
    let d = model.config.embed_dim();
    let mut out = Array2::zeros((n, d));
    let per = clips.sample_len();
    let mut shape = clips.shape;
    for start in (0..n).step_by(chunk.max(1)) {
        let end = (start + chunk.max(1)).min(n);
        shape[0] = end - start;
        let part = Volume::from_vec(clips.data[start * per..end * per].to_vec(), shape);
        let e = model.embed(&part, false)?;
        for r in 0..e.rows {
            for (o, &v) in out.row_mut(start + r).iter_mut().zip(e.row(r)) {
                *o = v as f64;
            }
        }
    }
    Ok(out)
}

fn video_clips(model: &Encoder<f32>, videos: &VideoSet, i: usize, crops: &CropConfig) -> Result<Volume<f32>> {
    let cfg = &model.config;
    let taus = temporal_crops(videos.t, cfg.clip_len, crops.n_temporal, crops.speed_exponent)?;
    let sigmas = spatial_crops(videos.h, videos.w, crops.n_spatial, crops.crop_fraction)?;
    let mut buf = Vec::new();
    for tau in &taus {
        let raw = videos.clip(i, tau, cfg.clip_len)?;
        for s in &sigmas {
            buf.extend(apply_spatial(&raw, s, cfg.resolution, cfg.resolution)?.frames().iter().copied());
        }
    }
    Ok(Volume::from_vec(
        buf,
        [taus.len() * sigmas.len(), cfg.clip_len, cfg.resolution, cfg.resolution, videos.c],
    ))
}

fn embed_range(model: &mut Encoder<f32>, videos: &VideoSet, range: std::ops::Range<usize>, crops: &CropConfig) -> Result<Array2<f64>> {
    let d = model.config.embed_dim();
    let mut out = Array2::zeros((range.len(), d));
    for (row, i) in range.enumerate() {
        let e = embed_clips(model, &video_clips(model, videos, i, crops)?, crops.chunk)?;
        out.row_mut(row).assign(&e.mean_axis(Axis(0)).expect("at least one crop"));
    }
    Ok(out)
}

/// Per-video mean of the crop embeddings, before standardization.
pub fn embed_videos(model: &Encoder<f32>, videos: &VideoSet, crops: &CropConfig) -> Result<Array2<f64>> {
    let n = videos.len();
    let threads = crops.threads.clamp(1, n.max(1));
    let per = n.div_ceil(threads);
    let parts: Vec<Result<Array2<f64>>> = thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|k| {
                let mut local = model.clone();
                let range = (k * per).min(n)..((k + 1) * per).min(n);
                s.spawn(move || embed_range(&mut local, videos, range, crops))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("extraction worker panicked")).collect()
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
}

/// Per-dimension mean and standard deviation of the training features.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardization {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardization {
    /// Population statistics; constant dimensions get unit scale.
    pub fn fit(raw: &Array2<f64>) -> Result<Self> {
        if raw.nrows() == 0 {
            return Err(Error::EmptyBank);
        }
        let mean = raw.mean_axis(Axis(0)).expect("non-empty");
        let std = raw
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-12 { s } else { 1.0 });
        Ok(Self { mean, std })
    }

    pub fn apply(&self, raw: &Array2<f64>) -> Result<Array2<f64>> {
        if raw.ncols() != self.mean.len() {
            return Err(Error::Shape(format!("{} features, statistics for {}", raw.ncols(), self.mean.len())));
        }
        Ok((raw - &self.mean) / &self.std)
    }
}

/// Standardized features, their labels and the training statistics used.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub features: Array2<f64>,
    pub labels: Vec<u16>,
    pub stats: Standardization,
}

impl FeatureBank {
    /// Bank of a training split: statistics come from `raw` itself.
    pub fn fit(raw: &Array2<f64>, labels: Vec<u16>) -> Result<Self> {
        let stats = Standardization::fit(raw)?;
        Self::with_stats(raw, labels, stats)
    }

    /// Bank standardized with statistics from another (training) split.
    pub fn with_stats(raw: &Array2<f64>, labels: Vec<u16>, stats: Standardization) -> Result<Self> {
        if labels.len() != raw.nrows() {
            return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), raw.nrows())));
        }
        Ok(Self {
            features: stats.apply(raw)?,
            labels,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows `idx`, keeping the statistics.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            stats: self.stats.clone(),
        }
    }

    pub fn to_archive(&self) -> Archive<f64> {
        let mut a = Archive::new();
        let (n, d) = self.features.dim();
        a.insert("features", &[n, d], self.features.iter().copied().collect());
        a.insert("labels", &[n], self.labels.iter().map(|&l| l as f64).collect());
        a.insert("mean", &[d], self.stats.mean.to_vec());
        a.insert("std", &[d], self.stats.std.to_vec());
        a.metadata.insert("format".into(), "timeeq-bank-1".into());
        a
    }

    pub fn from_archive(a: &Archive<f64>) -> Result<Self> {
        let (shape, values) = a.get("features")?;
        let [n, d] = shape[..] else {
            return Err(Error::Checkpoint(format!("features of shape {shape:?}")));
        };
        let features = Array2::from_shape_vec((n, d), values.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let labels: Vec<u16> = a.get("labels")?.1.iter().map(|&l| l as u16).collect();
        let mean = Array1::from(a.get("mean")?.1.clone());
        let std = Array1::from(a.get("std")?.1.clone());
        if labels.len() != n || mean.len() != d || std.len() != d {
            return Err(Error::Checkpoint("bank arrays disagree in size".into()));
        }
        Ok(Self {
            features,
            labels,
            stats: Standardization { mean, std },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Multi-crop features of `videos`. Without `stats` the set is treated as
/// the training split and standardized with its own statistics.
pub fn extract_features(
    model: &Encoder<f32>,
    videos: &VideoSet,
    crops: &CropConfig,
    stats: Option<&Standardization>,
) -> Result<FeatureBank> {
    if videos.is_empty() {
        return Err(Error::EmptyBank);
    }
    let raw = embed_videos(model, videos, crops)?;
    match stats {
        Some(s) => FeatureBank::with_stats(&raw, videos.labels.clone(), s.clone()),
        None => FeatureBank::fit(&raw, videos.labels.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::synthvid::{generate_dataset, GenerateConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-3.0..5.0))
    }

    fn setup() -> (Encoder<f32>, VideoSet) {
        let data = generate_dataset(&GenerateConfig {
            n_classes: 4,
            n_per_class: 2,
            frames: 40,
            height: 20,
            width: 20,
            channels: 3,
            seed: 9,
        })
        .unwrap();
        let model = Encoder::new(EncoderConfig::with_widths(8, 16, [4, 4, 8, 8]), 3).unwrap();
        (model, data)
    }

    #[test]
    fn crops_are_evenly_spaced_and_deterministic() {
        let t = temporal_crops(128, 16, 4, 2).unwrap();
        assert_eq!(t.iter().map(|c| c.start_frame).collect::<Vec<_>>(), vec![0, 21, 43, 64]);
        assert_eq!(temporal_crops(128, 16, 1, 2).unwrap()[0].start_frame, 32);
        assert!(temporal_crops(60, 16, 2, 2).is_err());
        let s = spatial_crops(32, 32, 5, 0.875).unwrap();
        assert_eq!(s[0].crop_box, (2, 2, 28, 28));
        assert_eq!(s[4].crop_box, (4, 4, 28, 28));
        assert!(spatial_crops(32, 32, 3, 0.875).is_err());
    }

    #[test]
    fn video_feature_is_mean_of_crop_embeddings() {
        let (mut model, data) = setup();
        let crops = CropConfig {
            n_temporal: 3,
            n_spatial: 5,
            speed_exponent: 1,
            ..CropConfig::default()
        };
        let raw = embed_videos(&model, &data, &crops).unwrap();
        let clips = video_clips(&model, &data, 2, &crops).unwrap();
        assert_eq!(clips.batch(), 15);
        let per_crop = embed_clips(&mut model, &clips, 1).unwrap();
        let mean = per_crop.mean_axis(Axis(0)).unwrap();
        for (a, b) in raw.row(2).iter().zip(&mean) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicated_video_gives_identical_rows_and_threads_agree() {
        let (model, data) = setup();
        let dup = data.subset(&[0, 1, 0, 5]);
        let crops = CropConfig {
            speed_exponent: 1,
            ..CropConfig::default()
        };
        let raw = embed_videos(&model, &dup, &crops).unwrap();
        assert_eq!(raw.row(0), raw.row(2));
        let par = embed_videos(&model, &dup, &CropConfig { threads: 3, ..crops }).unwrap();
        assert_eq!(raw, par);
    }

    #[test]
    fn standardized_train_bank_has_unit_moments() {
        let raw = random_matrix(50, 6, 1);
        let bank = FeatureBank::fit(&raw, vec![0; 50]).unwrap();
        let m = bank.features.mean_axis(Axis(0)).unwrap();
        let s = bank.features.std_axis(Axis(0), 0.0);
        assert!(m.iter().all(|v| v.abs() < 1e-6));
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn test_statistics_never_leak_into_train_bank() {
        let train_raw = random_matrix(40, 5, 2);
        let test_raw = random_matrix(30, 5, 3) * 4.0 + 7.0;
        let train = FeatureBank::fit(&train_raw, vec![0; 40]).unwrap();
        let before = train.clone();
        let test = FeatureBank::with_stats(&test_raw, vec![0; 30], train.stats.clone()).unwrap();
        // refitting on the test split is a different standardization ...
        let refit = Standardization::fit(&test_raw).unwrap();
        assert_ne!(refit, train.stats);
        // ... and leaves the train bank and the test bank's statistics alone
        assert_eq!(train, before);
        assert_eq!(test.stats, train.stats);
        let m = test.features.mean_axis(Axis(0)).unwrap();
        assert!(m.iter().any(|v| v.abs() > 0.5));
    }

    #[test]
    fn bank_archive_round_trip() {
        let bank = FeatureBank::fit(&random_matrix(7, 3, 4), vec![1, 0, 2, 2, 1, 0, 3]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bank.safetensors");
        bank.save(&p).unwrap();
        assert_eq!(FeatureBank::load(&p).unwrap(), bank);
    }
}
