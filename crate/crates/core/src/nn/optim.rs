use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Module, Scalar};

/// Linear warmup to `base_lr`, then cosine decay to zero at the final step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupCosine {
    pub base_lr: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl WarmupCosine {
    pub fn new(base_lr: f64, total_steps: u64, warmup_fraction: f64) -> Self {
        let warmup = ((total_steps as f64 * warmup_fraction).round() as u64).clamp(1, total_steps.max(1));
        Self {
            base_lr,
            total_steps,
            warmup_steps: warmup,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let last = self.total_steps.saturating_sub(1);
        if last <= self.warmup_steps {
            return if step >= last { 0.0 } else { self.base_lr };
        }
        let progress = ((step - self.warmup_steps) as f64 / (last - self.warmup_steps) as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    /// First and second moments, keyed by parameter name.
    pub moments: BTreeMap<String, (Vec<F>, Vec<F>)>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step<M: Module<F> + ?Sized>(&mut self, model: &mut M, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let decay = F::from_f64(1.0 - lr * self.weight_decay);
        let (b1f, b2f) = (F::from_f64(b1), F::from_f64(b2));
        let (ob1, ob2) = (F::from_f64(1.0 - b1), F::from_f64(1.0 - b2));
        let step_size = F::from_f64(lr / bc1);
        let inv_bc2 = F::from_f64(1.0 / bc2);
        let eps = F::from_f64(self.eps);
        let moments = &mut self.moments;
        model.visit_params("", &mut |name, p| {
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![F::zero(); p.len()], vec![F::zero(); p.len()]));
            for i in 0..p.len() {
                let g = p.grad[i];
                m[i] = b1f * m[i] + ob1 * g;
                v[i] = b2f * v[i] + ob2 * g * g;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                p.value[i] = p.value[i] * decay - step_size * m[i] / denom;
            }
        });
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar, M: Module<F> + ?Sized>(model: &mut M, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    model.visit_params("", &mut |_, p| {
        sq += p.grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>();
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = F::from_f64(max_norm / (norm + 1e-12));
        model.visit_params("", &mut |_, p| p.grad.iter_mut().for_each(|g| *g *= s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Module, Param};

    struct One(Param<f64>);

    impl Module<f64> for One {
        fn visit_params(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f("p", &mut self.0);
        }
    }

    #[test]
    fn schedule_shape() {
        let s = WarmupCosine::new(3e-4, 1000, 0.05);
        assert_eq!(s.warmup_steps, 50);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(50) - 3e-4).abs() < 1e-15);
        assert!(s.lr(999) <= 1e-6);
        assert!(s.lr(25) > 0.0 && s.lr(25) < 3e-4);
        for st in 50..999 {
            assert!(s.lr(st + 1) <= s.lr(st));
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut m = One(Param::filled(&[2], 1.0));
        m.0.grad = vec![0.5, -2.0];
        let mut opt = AdamW::new(0.0);
        opt.step(&mut m, 0.1);
        assert!((m.0.value[0] - 0.9).abs() < 1e-6);
        assert!((m.0.value[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut m = One(Param::filled(&[1], 2.0));
        let mut opt = AdamW::new(0.5);
        opt.step(&mut m, 0.1);
        // zero gradient: only the decay acts
        assert!((m.0.value[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut m = One(Param::zeros(&[2]));
        m.0.grad = vec![30.0, 40.0];
        let n = clip_grad_norm(&mut m, 10.0);
        assert_eq!(n, 50.0);
        let after = (m.0.grad[0].powi(2) + m.0.grad[1].powi(2)).sqrt();
        assert!((after - 10.0).abs() < 1e-9);
    }
}
