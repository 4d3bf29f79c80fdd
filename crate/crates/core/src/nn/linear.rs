use rand::Rng;

use super::tensor::join;
use super::{gemm, Matrix, Module, Op, Param, Scalar};

/// Fully connected layer, `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    cached_input: Option<Matrix<F>>,
}

impl<F: Scalar> Linear<F> {
    /// `gain` 2.0 for layers feeding a rectifier, 1.0 for output layers.
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::fan_in_normal(&[d_in, d_out], d_in, gain, rng),
            bias: Param::zeros(&[d_out]),
            cached_input: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&mut self, x: &Matrix<F>, keep_cache: bool) -> Matrix<F> {
        assert_eq!(x.cols, self.d_in(), "linear input width");
        let mut y = Matrix::zeros(x.rows, self.d_out());
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(&self.bias.value);
        }
        gemm(x.rows, x.cols, y.cols, &x.data, Op::N, &self.weight.value, Op::N, &mut y.data, true);
        self.cached_input = keep_cache.then(|| x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Matrix<F>) -> Matrix<F> {
        let x = self.cached_input.as_ref().expect("linear backward without forward cache");
        gemm(x.cols, x.rows, dy.cols, &x.data, Op::T, &dy.data, Op::N, &mut self.weight.grad, true);
        for r in 0..dy.rows {
            for (g, d) in self.bias.grad.iter_mut().zip(dy.row(r)) {
                *g += *d;
            }
        }
        let mut dx = Matrix::zeros(dy.rows, x.cols);
        gemm(dy.rows, dy.cols, x.cols, &dy.data, Op::N, &self.weight.value, Op::T, &mut dx.data, false);
        dx
    }

    /// The input cached by the last training forward, if any.
    pub fn cached_input(&self) -> Option<&Matrix<F>> {
        self.cached_input.as_ref()
    }
}

impl<F: Scalar> Module<F> for Linear<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Stack of linear layers with rectifiers between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp<F> {
    pub layers: Vec<Linear<F>>,
}

impl<F: Scalar> Mlp<F> {
    /// `widths` lists every layer boundary, input first, output last.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { 1.0 } else { 2.0 };
                Linear::new(widths[i], widths[i + 1], gain, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().expect("non-empty").d_out()
    }

    pub fn forward(&mut self, x: &Matrix<F>, keep_cache: bool) -> Matrix<F> {
        let n = self.layers.len();
        let mut h = self.layers[0].forward(x, keep_cache);
        for i in 1..n {
            relu_in_place(&mut h.data);
            h = self.layers[i].forward(&h, keep_cache);
        }
        h
    }

    pub fn backward(&mut self, dy: &Matrix<F>) -> Matrix<F> {
        let mut g = dy.clone();
        for i in (0..self.layers.len()).rev() {
            g = self.layers[i].backward(&g);
            if i > 0 {
                // layer i's input is the rectifier output of layer i-1
                let act = self.layers[i].cached_input().expect("forward cache");
                for (d, a) in g.data.iter_mut().zip(&act.data) {
                    if *a <= F::zero() {
                        *d = F::zero();
                    }
                }
            }
        }
        g
    }
}

impl<F: Scalar> Module<F> for Mlp<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params(&join(prefix, &i.to_string()), f);
        }
    }
}

pub fn relu_in_place<F: Scalar>(x: &mut [F]) {
    for v in x {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}
