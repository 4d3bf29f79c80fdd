use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Scalar;

/// A trainable array with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<F> {
    pub value: Vec<F>,
    pub grad: Vec<F>,
    pub shape: Vec<usize>,
}

impl<F: Scalar> Param<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            value: vec![F::zero(); len],
            grad: vec![F::zero(); len],
            shape: shape.to_vec(),
        }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        let mut p = Self::zeros(shape);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    /// Gaussian init with standard deviation `sqrt(gain / fan_in)`.
    pub fn fan_in_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        let std = (gain / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for v in p.value.iter_mut() {
            *v = F::from_f64(normal.sample(rng));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }
}

/// Visitor over named parameters and named non-trainable buffers.
pub trait Module<F: Scalar> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>));

    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Vec<F>)) {}

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A batch of channels-last volumes, shape `[n, t, h, w, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<F> {
    pub data: Vec<F>,
    pub shape: [usize; 5],
}

impl<F: Scalar> Volume<F> {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Self {
            data: vec![F::zero(); shape.iter().product()],
            shape,
        }
    }

    pub fn from_vec(data: Vec<F>, shape: [usize; 5]) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "volume data/shape mismatch");
        Self { data, shape }
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[4]
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn sample(&self, n: usize) -> &[F] {
        let s = self.sample_len();
        &self.data[n * s..(n + 1) * s]
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<F> {
    pub data: Vec<F>,
    pub rows: usize,
    pub cols: usize,
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            data: vec![F::zero(); rows * cols],
            rows,
            cols,
        }
    }

    pub fn from_vec(data: Vec<F>, rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data/shape mismatch");
        Self { data, rows, cols }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            data,
            rows: rows.len(),
            cols,
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `[a | b]` row by row.
    pub fn hconcat(a: &Matrix<F>, b: &Matrix<F>) -> Self {
        assert_eq!(a.rows, b.rows, "hconcat row mismatch");
        let mut out = Matrix::zeros(a.rows, a.cols + b.cols);
        for i in 0..a.rows {
            let r = out.row_mut(i);
            r[..a.cols].copy_from_slice(a.row(i));
            r[a.cols..].copy_from_slice(b.row(i));
        }
        out
    }

    /// Rows gathered by index.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
