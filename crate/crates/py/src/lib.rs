use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use timeeq::clipops::{self, Direction};
use timeeq::evalkit::{
    equivariance_diagnostic, extract_features, linear_probe, nn_classify, retrieval_recall, CropConfig, Neighbors,
    ProbeConfig,
};
use timeeq::nn::Matrix;
use timeeq::objectives;
use timeeq::synthvid::{self, GenerateConfig};
use timeeq::trainloop::{self, Equivariance, PlanConfig};
use timeeq::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e @ Error::NonFiniteLoss { .. } => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

/// A labelled set of synthetic videos stored as bytes.
#[pyclass(name = "VideoSet", module = "pytimeeq")]
struct PyVideoSet {
    inner: synthvid::VideoSet,
}

#[pymethods]
impl PyVideoSet {
    #[staticmethod]
    #[pyo3(signature = (n_classes=8, n_per_class=100, frames=128, size=32, channels=3, seed=0))]
    fn generate(n_classes: usize, n_per_class: usize, frames: usize, size: usize, channels: usize, seed: u64) -> PyResult<Self> {
        let cfg = GenerateConfig {
            n_classes,
            n_per_class,
            frames,
            height: size,
            width: size,
            channels,
            seed,
        };
        Ok(Self {
            inner: synthvid::generate_dataset(&cfg).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: synthvid::load_fvc(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        synthvid::write_fvc(&path, &self.inner).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(n, frames, height, width, channels)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize, usize) {
        let s = &self.inner;
        (s.n, s.t, s.h, s.w, s.c)
    }

    #[getter]
    fn labels(&self) -> Vec<u16> {
        self.inner.labels.clone()
    }

    /// Raw uint8 pixels of video `i` in frame, row, column, channel order.
    fn video_bytes<'py>(&self, py: Python<'py>, i: usize) -> PyResult<Bound<'py, PyBytes>> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("video {i} out of range")));
        }
        Ok(PyBytes::new(py, self.inner.video_bytes(i)))
    }

    /// Stratified `(train, test)` split.
    #[pyo3(signature = (test_fraction=0.2))]
    fn split(&self, test_fraction: f64) -> PyResult<(Self, Self)> {
        let (a, b) = self.inner.train_test_split(test_fraction).map_err(to_py)?;
        Ok((Self { inner: a }, Self { inner: b }))
    }
}

#[pyclass(name = "TemporalTransform", module = "pytimeeq")]
struct PyTemporalTransform {
    inner: clipops::TemporalTransform,
}

#[pymethods]
impl PyTemporalTransform {
    #[new]
    #[pyo3(signature = (speed_exponent, start_frame, reverse=false))]
    fn new(speed_exponent: u8, start_frame: usize, reverse: bool) -> Self {
        let dir = if reverse { Direction::Reverse } else { Direction::Forward };
        Self {
            inner: clipops::TemporalTransform::new(speed_exponent, dir, start_frame),
        }
    }

    #[getter]
    fn stride(&self) -> usize {
        self.inner.stride()
    }

    fn fits(&self, video_len: usize, clip_len: usize) -> bool {
        self.inner.fits(video_len, clip_len)
    }

    fn frame_indices(&self, clip_len: usize) -> Vec<usize> {
        clipops::frame_indices(&self.inner, clip_len)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// 0 = p first, 1 = overlapping, 2 = q first.
#[pyfunction]
fn overlap_order_label(p: &PyTemporalTransform, q: &PyTemporalTransform, clip_len: usize) -> usize {
    clipops::overlap_order_label(&p.inner, &q.inner, clip_len).label()
}

#[pyfunction]
#[pyo3(signature = (x, y, temperature=objectives::LAMBDA))]
fn similarity(x: Vec<f64>, y: Vec<f64>, temperature: f64) -> PyResult<f64> {
    objectives::similarity(&x, &y, temperature).map_err(to_py)
}

/// Grouped contrastive loss of `codes` (one row per sample) and its gradient.
#[pyfunction]
#[pyo3(signature = (codes, ids, temperature=objectives::LAMBDA))]
fn contrastive_loss(codes: Vec<Vec<f64>>, ids: Vec<u64>, temperature: f64) -> PyResult<(f64, Vec<Vec<f64>>)> {
    if codes.is_empty() || codes.iter().any(|r| r.len() != codes[0].len()) {
        return Err(PyValueError::new_err("codes must be a non-empty rectangular list"));
    }
    let m = Matrix::from_rows(&codes);
    let out = objectives::grouped_nce(&m, &m, &ids, temperature).map_err(to_py)?;
    let grad = (0..out.grad.rows).map(|r| out.grad.row(r).to_vec()).collect();
    Ok((out.loss, grad))
}

#[pyclass(name = "TrainConfig", module = "pytimeeq")]
struct PyTrainConfig {
    inner: trainloop::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: trainloop::TrainConfig::default(),
        }
    }

    /// Ablation preset `"a"` .. `"o"`.
    #[staticmethod]
    fn preset(name: char) -> PyResult<Self> {
        Ok(Self {
            inner: trainloop::TrainConfig::preset(name).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: trainloop::TrainConfig::from_toml(text).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    /// Effective `(equi, inst, speed, direction, overlap)` weights.
    fn loss_weights(&self) -> [f64; 5] {
        self.inner.effective_weights().as_array()
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.batch_size
    }

    #[setter]
    fn set_batch_size(&mut self, v: usize) {
        self.inner.batch_size = v;
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[setter]
    fn set_epochs(&mut self, v: usize) {
        self.inner.epochs = v;
    }

    #[getter]
    fn max_steps(&self) -> Option<u64> {
        self.inner.max_steps
    }

    #[setter]
    fn set_max_steps(&mut self, v: Option<u64>) {
        self.inner.max_steps = v;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    #[getter]
    fn base_lr(&self) -> f64 {
        self.inner.base_lr
    }

    #[setter]
    fn set_base_lr(&mut self, v: f64) {
        self.inner.base_lr = v;
    }

    #[getter]
    fn clip_len(&self) -> usize {
        self.inner.clip_len
    }

    #[setter]
    fn set_clip_len(&mut self, v: usize) {
        self.inner.clip_len = v;
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.inner.resolution
    }

    #[setter]
    fn set_resolution(&mut self, v: usize) {
        self.inner.resolution = v;
    }

    #[getter]
    fn widths(&self) -> [usize; 4] {
        self.inner.widths
    }

    #[setter]
    fn set_widths(&mut self, v: [usize; 4]) {
        self.inner.widths = v;
    }

    #[getter]
    fn workers(&self) -> usize {
        self.inner.workers
    }

    #[setter]
    fn set_workers(&mut self, v: usize) {
        self.inner.workers = v;
    }
}

#[pyclass(name = "Trainer", module = "pytimeeq")]
struct PyTrainer {
    inner: trainloop::Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyTrainConfig, n_videos: usize) -> PyResult<Self> {
        Ok(Self {
            inner: trainloop::Trainer::new(config.inner.clone(), n_videos).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: trainloop::Trainer::load_checkpoint(&path).map_err(to_py)?,
        })
    }

    fn save(&mut self, path: PathBuf) -> PyResult<()> {
        self.inner.save_checkpoint(&path).map_err(to_py)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    #[getter]
    fn total_steps(&self) -> u64 {
        self.inner.total_steps
    }

    #[getter]
    fn config(&self) -> PyTrainConfig {
        PyTrainConfig {
            inner: self.inner.config.clone(),
        }
    }

    /// Runs up to `steps` more updates; returns one dict of losses per step.
    fn train<'py>(&mut self, py: Python<'py>, data: &PyVideoSet, steps: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let mut recs = Vec::new();
        let until = self.inner.step + steps;
        self.inner
            .run(&data.inner, until, |_, r| {
                recs.push(*r);
                Ok(())
            })
            .map_err(to_py)?;
        recs.iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("step", r.step)?;
                d.set_item("lr", r.lr)?;
                d.set_item("grad_norm", r.grad_norm)?;
                let l = &r.loss;
                for (k, v) in [
                    ("total", l.total),
                    ("equi", l.equi),
                    ("inst", l.inst),
                    ("aux_speed", l.aux_speed),
                    ("aux_direction", l.aux_direction),
                    ("aux_overlap", l.aux_overlap),
                ] {
                    d.set_item(k, v)?;
                }
                Ok(d)
            })
            .collect()
    }

    /// Frozen-feature metrics of the current model.
    #[pyo3(signature = (train, test, temporal_crops=4, probes=64))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        train: &PyVideoSet,
        test: &PyVideoSet,
        temporal_crops: usize,
        probes: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let model = &self.inner.model;
        let crops = CropConfig {
            n_temporal: temporal_crops,
            ..CropConfig::default()
        };
        let trb = extract_features(model, &train.inner, &crops, None).map_err(to_py)?;
        let teb = extract_features(model, &test.inner, &crops, Some(&trb.stats)).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("nn_accuracy", nn_classify(&trb, &teb, Neighbors::Disjoint).map_err(to_py)?)?;
        d.set_item(
            "linear_accuracy",
            linear_probe(&trb, &teb, &ProbeConfig::default()).map_err(to_py)?,
        )?;
        d.set_item(
            "recall",
            retrieval_recall(&teb, &trb, &[1, 5, 10, 20], Neighbors::Disjoint).map_err(to_py)?,
        )?;
        let cfg = &self.inner.config;
        let plan = PlanConfig::from_train(&trainloop::TrainConfig {
            equivariance: Equivariance::Temporal,
            arm: trainloop::Arm::Equivariant,
            ..cfg.clone()
        });
        let diag = equivariance_diagnostic(model, &test.inner, probes, &plan, cfg.seed).map_err(to_py)?;
        d.set_item("transform_match", diag.match_accuracy)?;
        d.set_item("transform_chance", diag.chance)?;
        d.set_item("speed_accuracy", diag.speed_accuracy)?;
        d.set_item("direction_accuracy", diag.direction_accuracy)?;
        d.set_item("order_accuracy", diag.overlap_accuracy)?;
        Ok(d)
    }
}

#[pymodule]
fn pytimeeq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVideoSet>()?;
    m.add_class::<PyTemporalTransform>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(overlap_order_label, m)?)?;
    m.add_function(wrap_pyfunction!(similarity, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add("LAMBDA", objectives::LAMBDA)?;
    Ok(())
}
