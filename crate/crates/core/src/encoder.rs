//! Trainable networks: the 3D-ResNet backbone, the two projection MLPs and
//! the three auxiliary classification heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, relu_in_place, BatchNorm, Conv3d, Matrix, Mlp, Module, Param, Scalar, Volume};

pub const SPEED_CLASSES: usize = 4;
pub const DIRECTION_CLASSES: usize = 2;
pub const OVERLAP_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub clip_len: usize,
    /// Square input side length in pixels.
    pub resolution: usize,
    pub channels: usize,
    /// Channel width of the stem/first stage and the three downsampling stages.
    /// The last width is the embedding dimension D.
    pub widths: [usize; 4],
    pub psi_hidden: usize,
    pub phi_hidden: usize,
    pub head_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::with_widths(16, 32, [16, 32, 64, 128])
    }
}

impl EncoderConfig {
    /// Config with the hidden sizes derived from D the default way.
    pub fn with_widths(clip_len: usize, resolution: usize, widths: [usize; 4]) -> Self {
        let d = widths[3];
        Self {
            clip_len,
            resolution,
            channels: 3,
            widths,
            psi_hidden: 2 * d,
            phi_hidden: d,
            head_hidden: d,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.widths[3]
    }

    /// Stem halves the spatial size, each later stage halves every axis.
    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 || self.clip_len % 8 != 0 {
            return Err(Error::Config(format!("clip_len {} must be a positive multiple of 8", self.clip_len)));
        }
        if self.resolution < 16 || self.resolution % 16 != 0 {
            return Err(Error::Config(format!("resolution {} must be a multiple of 16", self.resolution)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.widths.iter().chain([&self.psi_hidden, &self.phi_hidden, &self.head_hidden]).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Residual unit: two 3x3x3 convolutions with normalization, plus a
/// projected shortcut when the shape changes.
#[derive(Clone, Debug)]
pub struct ResBlock<F> {
    conv1: Conv3d<F>,
    bn1: BatchNorm<F>,
    conv2: Conv3d<F>,
    bn2: BatchNorm<F>,
    shortcut: Option<(Conv3d<F>, BatchNorm<F>)>,
    out_cache: Option<Vec<F>>,
}

impl<F: Scalar> ResBlock<F> {
    fn new(c_in: usize, c_out: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = [stride; 3];
        let shortcut = (stride != 1 || c_in != c_out)
            .then(|| (Conv3d::new(c_in, c_out, 1, s, rng), BatchNorm::new(c_out)));
        Self {
            conv1: Conv3d::new(c_in, c_out, 3, s, rng),
            bn1: BatchNorm::new(c_out),
            conv2: Conv3d::new(c_out, c_out, 3, [1, 1, 1], rng),
            bn2: BatchNorm::new(c_out),
            shortcut,
            out_cache: None,
        }
    }

    fn forward(&mut self, x: &Volume<F>, train: bool) -> Volume<F> {
        let mut h = self.conv1.forward(x, train);
        self.bn1.forward(&mut h.data, train);
        relu_in_place(&mut h.data);
        let mut y = self.conv2.forward(&h, train);
        self.bn2.forward(&mut y.data, train);
        match self.shortcut.as_mut() {
            Some((conv, bn)) => {
                let mut s = conv.forward(x, train);
                bn.forward(&mut s.data, train);
                y.data.iter_mut().zip(&s.data).for_each(|(a, b)| *a += *b);
            }
            None => y.data.iter_mut().zip(&x.data).for_each(|(a, b)| *a += *b),
        }
        relu_in_place(&mut y.data);
        self.out_cache = train.then(|| y.data.clone());
        y
    }

    fn backward(&mut self, dy: &Volume<F>) -> Volume<F> {
        let out = self.out_cache.take().expect("block backward without forward");
        let mut g = dy.clone();
        for (d, o) in g.data.iter_mut().zip(&out) {
            if *o <= F::zero() {
                *d = F::zero();
            }
        }
        let mut branch = g.clone();
        self.bn2.backward(&mut branch.data);
        let mut dmid = self.conv2.backward(&branch, true).expect("input grad");
        let mid = self.conv2.cached_input().expect("conv2 cache");
        for (d, a) in dmid.data.iter_mut().zip(&mid.data) {
            if *a <= F::zero() {
                *d = F::zero();
            }
        }
        self.bn1.backward(&mut dmid.data);
        let mut dx = self.conv1.backward(&dmid, true).expect("input grad");
        match self.shortcut.as_mut() {
            Some((conv, bn)) => {
                bn.backward(&mut g.data);
                let ds = conv.backward(&g, true).expect("input grad");
                dx.data.iter_mut().zip(&ds.data).for_each(|(a, b)| *a += *b);
            }
            None => dx.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += *b),
        }
        dx
    }
}

impl<F: Scalar> Module<F> for ResBlock<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.bn1.visit_params(&join(prefix, "bn1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.bn2.visit_params(&join(prefix, "bn2"), f);
        if let Some((c, b)) = self.shortcut.as_mut() {
            c.visit_params(&join(prefix, "short_conv"), f);
            b.visit_params(&join(prefix, "short_bn"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<F>)) {
        self.bn1.visit_buffers(&join(prefix, "bn1"), f);
        self.bn2.visit_buffers(&join(prefix, "bn2"), f);
        if let Some((_, b)) = self.shortcut.as_mut() {
            b.visit_buffers(&join(prefix, "short_bn"), f);
        }
    }
}

/// Reduced 3D-ResNet: a spatial stride-2 stem, four single-block stages
/// (the last three downsampling every axis by 2) and global average pooling.
#[derive(Clone, Debug)]
pub struct Backbone<F> {
    stem: Conv3d<F>,
    stem_bn: BatchNorm<F>,
    blocks: Vec<ResBlock<F>>,
    stem_out: Option<Vec<F>>,
    pooled_shape: Option<[usize; 5]>,
}

impl<F: Scalar> Backbone<F> {
    fn new(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.widths;
        let blocks = vec![
            ResBlock::new(w[0], w[0], 1, rng),
            ResBlock::new(w[0], w[1], 2, rng),
            ResBlock::new(w[1], w[2], 2, rng),
            ResBlock::new(w[2], w[3], 2, rng),
        ];
        Self {
            stem: Conv3d::new(cfg.channels, w[0], 3, [1, 2, 2], rng),
            stem_bn: BatchNorm::new(w[0]),
            blocks,
            stem_out: None,
            pooled_shape: None,
        }
    }

    /// Feature maps right before global pooling.
    pub fn feature_maps(&mut self, clips: &Volume<F>, train: bool) -> Volume<F> {
        let mut h = self.stem.forward(clips, train);
        self.stem_bn.forward(&mut h.data, train);
        relu_in_place(&mut h.data);
        self.stem_out = train.then(|| h.data.clone());
        for b in self.blocks.iter_mut() {
            h = b.forward(&h, train);
        }
        h
    }

    pub fn forward(&mut self, clips: &Volume<F>, train: bool) -> Matrix<F> {
        let maps = self.feature_maps(clips, train);
        self.pooled_shape = train.then_some(maps.shape);
        global_avg_pool(&maps)
    }

    /// Backpropagates an embedding gradient through pooling and all stages.
    pub fn backward(&mut self, d_embed: &Matrix<F>) {
        let shape = self.pooled_shape.take().expect("backbone backward without train forward");
        let mut g = global_avg_pool_backward(d_embed, shape);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        let out = self.stem_out.take().expect("stem cache");
        for (d, o) in g.data.iter_mut().zip(&out) {
            if *o <= F::zero() {
                *d = F::zero();
            }
        }
        self.stem_bn.backward(&mut g.data);
        self.stem.backward(&g, false);
    }
}

impl<F: Scalar> Module<F> for Backbone<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        self.stem_bn.visit_params(&join(prefix, "stem_bn"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("block{i}")), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<F>)) {
        self.stem_bn.visit_buffers(&join(prefix, "stem_bn"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_buffers(&join(prefix, &format!("block{i}")), f);
        }
    }
}

pub fn global_avg_pool<F: Scalar>(maps: &Volume<F>) -> Matrix<F> {
    let [n, t, h, w, c] = maps.shape;
    let p = t * h * w;
    let inv = F::from_f64(1.0 / p as f64);
    let mut out = Matrix::zeros(n, c);
    for s in 0..n {
        let src = maps.sample(s);
        let row = out.row_mut(s);
        for pos in 0..p {
            for (r, v) in row.iter_mut().zip(&src[pos * c..(pos + 1) * c]) {
                *r += *v;
            }
        }
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

fn global_avg_pool_backward<F: Scalar>(d: &Matrix<F>, shape: [usize; 5]) -> Volume<F> {
    let [n, t, h, w, c] = shape;
    let p = t * h * w;
    let inv = F::from_f64(1.0 / p as f64);
    let mut g = Volume::zeros(shape);
    for s in 0..n {
        let scaled: Vec<F> = d.row(s).iter().map(|v| *v * inv).collect();
        for pos in 0..p {
            let off = (s * p + pos) * c;
            g.data[off..off + c].copy_from_slice(&scaled);
        }
    }
    g
}

/// Backbone F, projections ψ (pairwise) and φ (per clip), and the speed,
/// direction and overlap/order classifiers. No parameters are shared.
#[derive(Clone, Debug)]
pub struct Encoder<F> {
    pub config: EncoderConfig,
    pub backbone: Backbone<F>,
    pub psi: Mlp<F>,
    pub phi: Mlp<F>,
    pub speed_head: Mlp<F>,
    pub direction_head: Mlp<F>,
    pub overlap_head: Mlp<F>,
}

impl<F: Scalar> Encoder<F> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim();
        Ok(Self {
            backbone: Backbone::new(&config, &mut rng),
            psi: Mlp::new(&[2 * d, config.psi_hidden, config.psi_hidden, d], &mut rng),
            phi: Mlp::new(&[d, config.phi_hidden, config.phi_hidden, d], &mut rng),
            speed_head: Mlp::new(&[d, config.head_hidden, SPEED_CLASSES], &mut rng),
            direction_head: Mlp::new(&[d, config.head_hidden, DIRECTION_CLASSES], &mut rng),
            overlap_head: Mlp::new(&[2 * d, config.head_hidden, OVERLAP_CLASSES], &mut rng),
            config,
        })
    }

    pub fn check_clips(&self, clips: &Volume<F>) -> Result<()> {
        let c = &self.config;
        let want = [clips.shape[0], c.clip_len, c.resolution, c.resolution, c.channels];
        if clips.shape != want || clips.shape[0] == 0 {
            return Err(Error::Shape(format!("expected clips {want:?}, got {:?}", clips.shape)));
        }
        Ok(())
    }

    /// Embeddings F(x) of a batch of clips.
    pub fn embed(&mut self, clips: &Volume<F>, train: bool) -> Result<Matrix<F>> {
        self.check_clips(clips)?;
        Ok(self.backbone.forward(clips, train))
    }

    /// ψ on the ordered concatenation `[e_p; e_q]`.
    pub fn psi_forward(&mut self, e_p: &Matrix<F>, e_q: &Matrix<F>) -> Matrix<F> {
        self.psi.forward(&Matrix::hconcat(e_p, e_q), false)
    }

    pub fn phi_forward(&mut self, e: &Matrix<F>) -> Matrix<F> {
        self.phi.forward(e, false)
    }

    pub fn head_speed(&mut self, e: &Matrix<F>) -> Matrix<F> {
        self.speed_head.forward(e, false)
    }

    pub fn head_direction(&mut self, e: &Matrix<F>) -> Matrix<F> {
        self.direction_head.forward(e, false)
    }

    pub fn head_overlap(&mut self, e_p: &Matrix<F>, e_q: &Matrix<F>) -> Matrix<F> {
        self.overlap_head.forward(&Matrix::hconcat(e_p, e_q), false)
    }
}

impl<F: Scalar> Module<F> for Encoder<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        let p = |n: &str| join(prefix, n);
        self.backbone.visit_params(&p("backbone"), f);
        self.psi.visit_params(&p("psi"), f);
        self.phi.visit_params(&p("phi"), f);
        self.speed_head.visit_params(&p("speed_head"), f);
        self.direction_head.visit_params(&p("direction_head"), f);
        self.overlap_head.visit_params(&p("overlap_head"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<F>)) {
        self.backbone.visit_buffers(&join(prefix, "backbone"), f);
    }
}

/// Row-wise softmax.
pub fn softmax<F: Scalar>(logits: &Matrix<F>) -> Matrix<F> {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

pub fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
