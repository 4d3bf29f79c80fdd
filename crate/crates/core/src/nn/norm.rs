use super::tensor::join;
use super::{Module, Param, Scalar};

/// Per-channel batch normalization over channels-last data.
///
/// Training mode normalizes with batch statistics and updates the running
/// estimates; evaluation mode uses the running estimates only.
#[derive(Clone, Debug)]
pub struct BatchNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    momentum: f64,
    eps: f64,
    cache: Option<BnCache<F>>,
}

#[derive(Clone, Debug)]
struct BnCache<F> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], F::one()),
            beta: Param::zeros(&[channels]),
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes `x` in place.
    pub fn forward(&mut self, x: &mut [F], train: bool) {
        let c = self.channels();
        let rows = x.len() / c;
        assert_eq!(rows * c, x.len(), "batchnorm channel mismatch");
        let eps = F::from_f64(self.eps);
        if !train {
            for r in 0..rows {
                for (j, v) in x[r * c..(r + 1) * c].iter_mut().enumerate() {
                    let inv = F::one() / (self.running_var[j] + eps).sqrt();
                    *v = (*v - self.running_mean[j]) * inv * self.gamma.value[j] + self.beta.value[j];
                }
            }
            self.cache = None;
            return;
        }
        assert!(rows > 1, "batch statistics need more than one value per channel");
        let mut mean = vec![0.0f64; c];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(&x[r * c..(r + 1) * c]) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0f64; c];
        for r in 0..rows {
            for ((s, v), m) in var.iter_mut().zip(&x[r * c..(r + 1) * c]).zip(&mean) {
                let d = v.as_f64() - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= rows as f64);
        let inv_std: Vec<F> = var.iter().map(|v| F::from_f64(1.0 / (v + self.eps).sqrt())).collect();
        let mean_f: Vec<F> = mean.iter().map(|&m| F::from_f64(m)).collect();
        let mut xhat = vec![F::zero(); x.len()];
        for r in 0..rows {
            let row = &mut x[r * c..(r + 1) * c];
            let xh = &mut xhat[r * c..(r + 1) * c];
            for j in 0..c {
                let z = (row[j] - mean_f[j]) * inv_std[j];
                xh[j] = z;
                row[j] = z * self.gamma.value[j] + self.beta.value[j];
            }
        }
        let mom = self.momentum;
        let unbias = rows as f64 / (rows as f64 - 1.0);
        for j in 0..c {
            let rm = self.running_mean[j].as_f64() * (1.0 - mom) + mom * mean[j];
            let rv = self.running_var[j].as_f64() * (1.0 - mom) + mom * var[j] * unbias;
            self.running_mean[j] = F::from_f64(rm);
            self.running_var[j] = F::from_f64(rv);
        }
        self.cache = Some(BnCache { xhat, inv_std });
    }

    /// Turns the output gradient in `dy` into the input gradient, in place.
    pub fn backward(&mut self, dy: &mut [F]) {
        let BnCache { xhat, inv_std } = self.cache.take().expect("batchnorm backward without train forward");
        let c = self.channels();
        let rows = dy.len() / c;
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for r in 0..rows {
            for j in 0..c {
                let g = dy[r * c + j].as_f64();
                sum_dy[j] += g;
                sum_dy_xhat[j] += g * xhat[r * c + j].as_f64();
            }
        }
        for j in 0..c {
            self.beta.grad[j] += F::from_f64(sum_dy[j]);
            self.gamma.grad[j] += F::from_f64(sum_dy_xhat[j]);
        }
        let m = rows as f64;
        let mean_dy: Vec<F> = sum_dy.iter().map(|s| F::from_f64(s / m)).collect();
        let mean_dy_xhat: Vec<F> = sum_dy_xhat.iter().map(|s| F::from_f64(s / m)).collect();
        for r in 0..rows {
            for j in 0..c {
                let i = r * c + j;
                let scale = self.gamma.value[j] * inv_std[j];
                dy[i] = scale * (dy[i] - mean_dy[j] - xhat[i] * mean_dy_xhat[j]);
            }
        }
    }
}

impl<F: Scalar> Module<F> for BatchNorm<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<F>)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}
