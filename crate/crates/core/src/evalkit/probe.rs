use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::FeatureBank;
use crate::error::{Error, Result};

/// Full-batch gradient descent settings for the linear probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub iterations: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            weight_decay: 1e-3,
            learning_rate: 0.5,
            momentum: 0.9,
            iterations: 500,
        }
    }
}

/// Multinomial logistic regression `softmax(x W + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearClassifier {
    pub fn logits(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        self.logits(x)
            .axis_iter(Axis(0))
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }

    pub fn accuracy(&self, bank: &FeatureBank) -> f64 {
        let pred = self.predict(&bank.features);
        let hits = pred.iter().zip(&bank.labels).filter(|(p, &y)| **p == y as usize).count();
        hits as f64 / bank.len().max(1) as f64
    }
}

/// Fits the probe on frozen training features.
pub fn fit_probe(train: &FeatureBank, n_classes: usize, cfg: &ProbeConfig) -> Result<LinearClassifier> {
    if train.is_empty() {
        return Err(Error::EmptyBank);
    }
    let first = train.labels[0];
    if train.labels.iter().all(|&y| y == first) {
        return Err(Error::Degenerate(format!("every training label is {first}")));
    }
    if let Some(&y) = train.labels.iter().find(|&&y| y as usize >= n_classes) {
        return Err(Error::LabelOutOfRange {
            label: y as usize,
            classes: n_classes,
        });
    }
    let x = &train.features;
    let (n, d) = x.dim();
    let mut onehot = Array2::<f64>::zeros((n, n_classes));
    for (i, &y) in train.labels.iter().enumerate() {
        onehot[[i, y as usize]] = 1.0;
    }
    let mut clf = LinearClassifier {
        weight: Array2::zeros((d, n_classes)),
        bias: Array1::zeros(n_classes),
    };
    let mut vw = Array2::<f64>::zeros((d, n_classes));
    let mut vb = Array1::<f64>::zeros(n_classes);
    for _ in 0..cfg.iterations {
        let mut p = clf.logits(x);
        for mut row in p.axis_iter_mut(Axis(0)) {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row /= s;
        }
        let g = (p - &onehot) / n as f64;
        let gw = x.t().dot(&g) + &clf.weight * cfg.weight_decay;
        let gb = g.sum_axis(Axis(0));
        vw = vw * cfg.momentum - gw * cfg.learning_rate;
        vb = vb * cfg.momentum - gb * cfg.learning_rate;
        clf.weight += &vw;
        clf.bias += &vb;
    }
    Ok(clf)
}

/// Test accuracy of a probe trained on `train`.
pub fn linear_probe(train: &FeatureBank, test: &FeatureBank, cfg: &ProbeConfig) -> Result<f64> {
    if train.dim() != test.dim() {
        return Err(Error::Shape(format!("train D={} vs test D={}", train.dim(), test.dim())));
    }
    if test.is_empty() {
        return Err(Error::EmptyBank);
    }
    let n_classes = train.labels.iter().chain(&test.labels).max().map_or(0, |&m| m as usize + 1);
    Ok(fit_probe(train, n_classes, cfg)?.accuracy(test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Gaussian blobs around `classes` random centers.
    fn blobs(n: usize, d: usize, classes: u16, spread: f64, rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<u16>) {
        let centers = Array2::from_shape_fn((classes as usize, d), |_| rng.sample::<f64, _>(StandardNormal) * 2.0);
        let labels: Vec<u16> = (0..n).map(|i| (i % classes as usize) as u16).collect();
        let x = Array2::from_shape_fn((n, d), |(i, j)| {
            centers[[labels[i] as usize, j]] + spread * rng.sample::<f64, _>(StandardNormal)
        });
        (x, labels)
    }

    fn split(x: &Array2<f64>, y: &[u16], n_train: usize) -> (FeatureBank, FeatureBank) {
        let train = FeatureBank::fit(&x.slice(ndarray::s![..n_train, ..]).to_owned(), y[..n_train].to_vec()).unwrap();
        let test = FeatureBank::with_stats(
            &x.slice(ndarray::s![n_train.., ..]).to_owned(),
            y[n_train..].to_vec(),
            train.stats.clone(),
        )
        .unwrap();
        (train, test)
    }

    #[test]
    fn separable_two_class_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 200;
        let y: Vec<u16> = (0..n).map(|i| (i % 2) as u16).collect();
        let x = Array2::from_shape_fn((n, 5), |(i, j)| {
            let noise: f64 = rng.random_range(-1.0..1.0);
            if j == 0 {
                if y[i] == 1 { 2.0 + noise.abs() } else { -2.0 - noise.abs() }
            } else {
                noise
            }
        });
        let (train, test) = split(&x, &y, 150);
        assert!(linear_probe(&train, &test, &ProbeConfig::default()).unwrap() >= 0.99);
    }

    #[test]
    fn shuffled_labels_give_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, mut y) = blobs(1200, 16, 4, 1.0, &mut rng);
        y.shuffle(&mut rng);
        let (train, test) = split(&x, &y, 600);
        let acc = linear_probe(&train, &test, &ProbeConfig::default()).unwrap();
        assert!((acc - 0.25).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn per_dimension_affine_rescaling_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, y) = blobs(300, 8, 3, 2.5, &mut rng);
        let scale = Array1::from_shape_fn(8, |_| rng.random_range(0.01..100.0) * if rng.random() { 1.0 } else { -1.0 });
        let shift = Array1::from_shape_fn(8, |_| rng.random_range(-50.0..50.0));
        let x2 = &x * &scale + &shift;
        let (a_train, a_test) = split(&x, &y, 200);
        let (b_train, b_test) = split(&x2, &y, 200);
        let a = linear_probe(&a_train, &a_test, &ProbeConfig::default()).unwrap();
        let b = linear_probe(&b_train, &b_test, &ProbeConfig::default()).unwrap();
        assert!((a - b).abs() <= 0.005, "{a} vs {b}");
    }

    #[test]
    fn single_class_training_set_is_degenerate() {
        let x = Array2::from_shape_fn((10, 3), |(i, j)| (i * 3 + j) as f64);
        let train = FeatureBank::fit(&x, vec![1; 10]).unwrap();
        assert!(matches!(linear_probe(&train, &train, &ProbeConfig::default()), Err(Error::Degenerate(_))));
    }
}
