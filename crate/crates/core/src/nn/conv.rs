use rand::Rng;

use super::tensor::join;
use super::{gemm, Module, Op, Param, Scalar, Volume};

/// Cubic-kernel 3D convolution over channels-last volumes, no bias.
///
/// Weights are stored as a `(k·k·k·c_in) x c_out` row-major matrix so the
/// forward pass is one GEMM against the im2col matrix of each sample.
#[derive(Clone, Debug)]
pub struct Conv3d<F> {
    pub weight: Param<F>,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: [usize; 3],
    pad: usize,
    cached_input: Option<Volume<F>>,
}

impl<F: Scalar> Conv3d<F> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, kernel: usize, stride: [usize; 3], rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let kc = kernel * kernel * kernel * c_in;
        Self {
            weight: Param::fan_in_normal(&[kc, c_out], kc, 2.0, rng),
            c_in,
            c_out,
            kernel,
            stride,
            pad: kernel / 2,
            cached_input: None,
        }
    }

    /// The input cached by the last training forward, if any.
    pub fn cached_input(&self) -> Option<&Volume<F>> {
        self.cached_input.as_ref()
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn output_dims(&self, t: usize, h: usize, w: usize) -> [usize; 3] {
        let o = |i: usize, s: usize| (i + 2 * self.pad - self.kernel) / s + 1;
        [o(t, self.stride[0]), o(h, self.stride[1]), o(w, self.stride[2])]
    }

    fn kcols(&self) -> usize {
        self.kernel * self.kernel * self.kernel * self.c_in
    }

    fn im2col(&self, x: &[F], dims: [usize; 3], out: [usize; 3], col: &mut [F]) {
        let [t_in, h_in, w_in] = dims;
        let [ot_n, oh_n, ow_n] = out;
        let (k, cin, pad) = (self.kernel, self.c_in, self.pad as isize);
        let mut off = 0;
        for ot in 0..ot_n {
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    for kt in 0..k {
                        let it = (ot * self.stride[0] + kt) as isize - pad;
                        for kh in 0..k {
                            let ih = (oh * self.stride[1] + kh) as isize - pad;
                            for kw in 0..k {
                                let iw = (ow * self.stride[2] + kw) as isize - pad;
                                let dst = &mut col[off..off + cin];
                                if it >= 0
                                    && (it as usize) < t_in
                                    && ih >= 0
                                    && (ih as usize) < h_in
                                    && iw >= 0
                                    && (iw as usize) < w_in
                                {
                                    let src = ((it as usize * h_in + ih as usize) * w_in + iw as usize) * cin;
                                    dst.copy_from_slice(&x[src..src + cin]);
                                } else {
                                    dst.iter_mut().for_each(|v| *v = F::zero());
                                }
                                off += cin;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[F], dims: [usize; 3], out: [usize; 3], dx: &mut [F]) {
        let [t_in, h_in, w_in] = dims;
        let [ot_n, oh_n, ow_n] = out;
        let (k, cin, pad) = (self.kernel, self.c_in, self.pad as isize);
        let mut off = 0;
        for ot in 0..ot_n {
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    for kt in 0..k {
                        let it = (ot * self.stride[0] + kt) as isize - pad;
                        for kh in 0..k {
                            let ih = (oh * self.stride[1] + kh) as isize - pad;
                            for kw in 0..k {
                                let iw = (ow * self.stride[2] + kw) as isize - pad;
                                if it >= 0
                                    && (it as usize) < t_in
                                    && ih >= 0
                                    && (ih as usize) < h_in
                                    && iw >= 0
                                    && (iw as usize) < w_in
                                {
                                    let dst = ((it as usize * h_in + ih as usize) * w_in + iw as usize) * cin;
                                    for (d, s) in dx[dst..dst + cin].iter_mut().zip(&col[off..off + cin]) {
                                        *d += *s;
                                    }
                                }
                                off += cin;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Volume<F>, keep_cache: bool) -> Volume<F> {
        let [n, t, h, w, c] = x.shape;
        assert_eq!(c, self.c_in, "conv input channels");
        let out = self.output_dims(t, h, w);
        let p = out.iter().product::<usize>();
        let kc = self.kcols();
        let mut y = Volume::zeros([n, out[0], out[1], out[2], self.c_out]);
        let mut col = vec![F::zero(); p * kc];
        for s in 0..n {
            self.im2col(x.sample(s), [t, h, w], out, &mut col);
            let ys = &mut y.data[s * p * self.c_out..(s + 1) * p * self.c_out];
            gemm(p, kc, self.c_out, &col, Op::N, &self.weight.value, Op::N, ys, false);
        }
        self.cached_input = keep_cache.then(|| x.clone());
        y
    }

    /// Accumulates the weight gradient; returns the input gradient when asked.
    pub fn backward(&mut self, dy: &Volume<F>, need_input_grad: bool) -> Option<Volume<F>> {
        let x = self.cached_input.as_ref().expect("conv backward without forward cache");
        let [n, t, h, w, _] = x.shape;
        let out = self.output_dims(t, h, w);
        let p = out.iter().product::<usize>();
        let kc = self.kcols();
        let mut col = vec![F::zero(); p * kc];
        let mut dcol = vec![F::zero(); p * kc];
        let mut dx = need_input_grad.then(|| Volume::zeros(x.shape));
        for s in 0..n {
            self.im2col(x.sample(s), [t, h, w], out, &mut col);
            let dys = &dy.data[s * p * self.c_out..(s + 1) * p * self.c_out];
            gemm(kc, p, self.c_out, &col, Op::T, dys, Op::N, &mut self.weight.grad, true);
            if let Some(dx) = dx.as_mut() {
                gemm(p, self.c_out, kc, dys, Op::N, &self.weight.value, Op::T, &mut dcol, false);
                let len = x.sample_len();
                self.col2im(&dcol, [t, h, w], out, &mut dx.data[s * len..(s + 1) * len]);
            }
        }
        dx
    }
}

impl<F: Scalar> Module<F> for Conv3d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
    }
}
