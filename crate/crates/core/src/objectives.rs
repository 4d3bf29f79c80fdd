//! Loss functions: the stop-gradient similarity, the grouped contrastive
//! objectives for transformation and instance discrimination, the auxiliary
//! cross-entropies and their weighted sum.
//!
//! Every contrastive term treats its anchor as the only differentiable input:
//! the positive and the negatives enter through `stopgrad`. The gradient
//! functions here therefore return derivatives with respect to the anchor
//! rows only; targets passed separately never receive gradient.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Matrix, Scalar};

/// Default temperature.
pub const LAMBDA: f64 = 0.1;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `exp(cos(x, stopgrad(y)) / lambda)`.
pub fn similarity<F: Scalar>(x: &[F], y: &[F], lambda: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("similarity of {}- and {}-vectors", x.len(), y.len())));
    }
    if lambda <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {lambda}")));
    }
    let xs: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
    let ys: Vec<f64> = y.iter().map(|v| v.as_f64()).collect();
    let (nx, ny) = (norm(&xs), norm(&ys));
    if nx == 0.0 {
        return Err(Error::DegenerateCode(0));
    }
    if ny == 0.0 {
        return Err(Error::DegenerateCode(1));
    }
    Ok((dot(&xs, &ys) / (nx * ny) / lambda).exp())
}

/// Loss value plus its gradient with respect to the anchor rows.
#[derive(Clone, Debug)]
pub struct NceOutput<F> {
    pub loss: f64,
    pub grad: Matrix<F>,
}

/// Group layout of a contrastive batch: every id owns exactly two rows.
#[derive(Clone, Debug)]
pub struct Grouping {
    /// `(row_a, row_b)` for each group, in order of first appearance.
    pub groups: Vec<(usize, usize)>,
    /// Group index of every row.
    pub group_of: Vec<usize>,
}

impl Grouping {
    pub fn new<G: Eq + Hash + std::fmt::Debug>(ids: &[G]) -> Result<Self> {
        let mut index: HashMap<&G, usize> = HashMap::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        let mut group_of = Vec::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            let g = *index.entry(id).or_insert_with(|| {
                members.push(Vec::new());
                members.len() - 1
            });
            members[g].push(row);
            group_of.push(g);
        }
        if let Some(bad) = members.iter().find(|m| m.len() != 2) {
            return Err(Error::MalformedBatchPlan(format!(
                "group {:?} appears {} times, expected exactly 2",
                ids[bad[0]],
                bad.len()
            )));
        }
        if members.len() < 2 {
            return Err(Error::MalformedBatchPlan(format!("need at least 2 groups, got {}", members.len())));
        }
        Ok(Self {
            groups: members.into_iter().map(|m| (m[0], m[1])).collect(),
            group_of,
        })
    }

    pub fn partner(&self, row: usize) -> usize {
        let (a, b) = self.groups[self.group_of[row]];
        if a == row {
            b
        } else {
            a
        }
    }
}

struct Normalized {
    unit: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

fn normalize<F: Scalar>(m: &Matrix<F>) -> Result<Normalized> {
    let mut unit = Vec::with_capacity(m.rows);
    let mut norms = Vec::with_capacity(m.rows);
    for r in 0..m.rows {
        let v: Vec<f64> = m.row(r).iter().map(|x| x.as_f64()).collect();
        let n = norm(&v);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateCode(r));
        }
        unit.push(v.iter().map(|x| x / n).collect());
        norms.push(n);
    }
    Ok(Normalized { unit, norms })
}

/// One anchor's term: `-log(d_pos / (d_pos + sum_h d_h))` where each other
/// group `h` contributes the mean similarity of its two codes. Returns the
/// term and `d term / d cos(anchor, target_k)` for every target row `k`.
fn anchor_term(anchor: &[f64], targets: &Normalized, grouping: &Grouping, row: usize, lambda: f64) -> (f64, Vec<f64>) {
    let n = targets.unit.len();
    let cos: Vec<f64> = (0..n).map(|k| dot(anchor, &targets.unit[k])).collect();
    let own = grouping.group_of[row];
    let partner = grouping.partner(row);
    let pos = cos[partner] / lambda;
    // log of the mean similarity of each negative group
    let mut logits = vec![pos];
    let mut neg_groups = Vec::new();
    for (g, &(a, b)) in grouping.groups.iter().enumerate() {
        if g == own {
            continue;
        }
        let (la, lb) = (cos[a] / lambda, cos[b] / lambda);
        let m = la.max(lb);
        logits.push(m + (0.5 * ((la - m).exp() + (lb - m).exp())).ln());
        neg_groups.push((a, b, la, lb));
    }
    // log(1 + sum_h exp(l_h - pos)), shifted so no term overflows
    let shift = logits[1..].iter().fold(0.0f64, |m, l| m.max(l - pos));
    let loss = shift + ((-shift).exp() + logits[1..].iter().map(|l| (l - pos - shift).exp()).sum::<f64>()).ln();
    let lse = pos + loss;
    let mut dcos = vec![0.0; n];
    dcos[partner] = ((pos - lse).exp() - 1.0) / lambda;
    for (&(a, b, la, lb), &lg) in neg_groups.iter().zip(&logits[1..]) {
        let w = (lg - lse).exp();
        let m = la.max(lb);
        let (ea, eb) = ((la - m).exp(), (lb - m).exp());
        dcos[a] += w * ea / (ea + eb) / lambda;
        dcos[b] += w * eb / (ea + eb) / lambda;
    }
    (loss, dcos)
}

/// Gradient of `cos(x, t_k)` w.r.t. `x`, weighted and summed over `k`.
fn cos_backward(x_unit: &[f64], x_norm: f64, targets: &Normalized, dcos: &[f64]) -> Vec<f64> {
    let dim = x_unit.len();
    let mut g = vec![0.0; dim];
    for (k, &w) in dcos.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let t = &targets.unit[k];
        let c = dot(x_unit, t);
        for d in 0..dim {
            g[d] += w * (t[d] - c * x_unit[d]) / x_norm;
        }
    }
    g
}

/// Grouped contrastive loss with separate anchor and (detached) target rows.
///
/// Row `i` of `anchors` is contrasted against the target rows: its positive is
/// the target of the other member of its group, and every other group is one
/// negative whose similarity is the mean over that group's two targets. The
/// loss is the mean over all anchors.
pub fn grouped_nce<F: Scalar, G: Eq + Hash + std::fmt::Debug>(
    anchors: &Matrix<F>,
    targets: &Matrix<F>,
    ids: &[G],
    lambda: f64,
) -> Result<NceOutput<F>> {
    if anchors.rows != ids.len() || targets.rows != ids.len() || anchors.cols != targets.cols {
        return Err(Error::Shape(format!(
            "anchors {}x{}, targets {}x{}, {} ids",
            anchors.rows,
            anchors.cols,
            targets.rows,
            targets.cols,
            ids.len()
        )));
    }
    if lambda <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {lambda}")));
    }
    let grouping = Grouping::new(ids)?;
    let a = normalize(anchors)?;
    let t = normalize(targets)?;
    let n = ids.len();
    let mut terms = Vec::with_capacity(n);
    let mut grad = Matrix::zeros(n, anchors.cols);
    for i in 0..n {
        let (l, dcos) = anchor_term(&a.unit[i], &t, &grouping, i, lambda);
        terms.push(l);
        let g = cos_backward(&a.unit[i], a.norms[i], &t, &dcos);
        for (o, v) in grad.row_mut(i).iter_mut().zip(g) {
            *o = F::from_f64(v / n as f64);
        }
    }
    // mean taken relative to the first term, exact when all terms agree
    let loss = terms[0] + terms.iter().map(|l| l - terms[0]).sum::<f64>() / n as f64;
    Ok(NceOutput { loss, grad })
}

/// A single anchor's contribution (not averaged) and its gradient over all
/// rows of one shared code matrix. Only row `anchor` can be non-zero.
pub fn nce_anchor_term<F: Scalar, G: Eq + Hash + std::fmt::Debug>(
    codes: &Matrix<F>,
    ids: &[G],
    anchor: usize,
    lambda: f64,
) -> Result<NceOutput<F>> {
    let grouping = Grouping::new(ids)?;
    let c = normalize(codes)?;
    let (loss, dcos) = anchor_term(&c.unit[anchor], &c, &grouping, anchor, lambda);
    let g = cos_backward(&c.unit[anchor], c.norms[anchor], &c, &dcos);
    let mut grad = Matrix::zeros(codes.rows, codes.cols);
    for (o, v) in grad.row_mut(anchor).iter_mut().zip(g) {
        *o = F::from_f64(v);
    }
    Ok(NceOutput { loss, grad })
}

/// Transformation discrimination: codes sharing a relative transformation
/// attract, other relative transformations repel.
pub fn equivariance_loss<F: Scalar, G: Eq + Hash + std::fmt::Debug>(
    codes: &Matrix<F>,
    group_ids: &[G],
    lambda: f64,
) -> Result<NceOutput<F>> {
    grouped_nce(codes, codes, group_ids, lambda)
}

/// Instance discrimination: the two augmented views of a video attract,
/// other videos repel.
pub fn instance_loss<F: Scalar, G: Eq + Hash + std::fmt::Debug>(
    codes: &Matrix<F>,
    instance_ids: &[G],
    lambda: f64,
) -> Result<NceOutput<F>> {
    grouped_nce(codes, codes, instance_ids, lambda)
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy<F: Scalar>(logits: &Matrix<F>, labels: &[usize]) -> Result<NceOutput<F>> {
    if logits.rows != labels.len() || logits.rows == 0 {
        return Err(Error::Shape(format!("{} logit rows for {} labels", logits.rows, labels.len())));
    }
    let k = logits.cols;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    let n = logits.rows as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows, k);
    for (r, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for (j, g) in grad.row_mut(r).iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            let target = if j == y { 1.0 } else { 0.0 };
            *g = F::from_f64((p - target) / n);
        }
    }
    Ok(NceOutput { loss: loss / n, grad })
}

/// Logits and labels of the three auxiliary heads; `None` marks a disabled task.
pub struct AuxInputs<'a, F> {
    pub speed: Option<(&'a Matrix<F>, &'a [usize])>,
    pub direction: Option<(&'a Matrix<F>, &'a [usize])>,
    pub overlap: Option<(&'a Matrix<F>, &'a [usize])>,
}

/// Per-head losses; disabled heads contribute 0 and no gradient.
pub struct AuxOutputs<F> {
    pub speed: Option<NceOutput<F>>,
    pub direction: Option<NceOutput<F>>,
    pub overlap: Option<NceOutput<F>>,
}

impl<F> AuxOutputs<F> {
    pub fn values(&self) -> (f64, f64, f64) {
        let v = |o: &Option<NceOutput<F>>| o.as_ref().map_or(0.0, |o| o.loss);
        (v(&self.speed), v(&self.direction), v(&self.overlap))
    }
}

pub fn aux_losses<F: Scalar>(inputs: &AuxInputs<'_, F>) -> Result<AuxOutputs<F>> {
    let run = |x: Option<(&Matrix<F>, &[usize])>| x.map(|(l, y)| cross_entropy(l, y)).transpose();
    Ok(AuxOutputs {
        speed: run(inputs.speed)?,
        direction: run(inputs.direction)?,
        overlap: run(inputs.overlap)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub equi: f64,
    pub inst: f64,
    pub speed: f64,
    pub direction: f64,
    pub overlap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl LossWeights {
    pub fn uniform(w: f64) -> Self {
        Self {
            equi: w,
            inst: w,
            speed: w,
            direction: w,
            overlap: w,
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.equi, self.inst, self.speed, self.direction, self.overlap]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub equi: f64,
    pub inst: f64,
    pub aux_speed: f64,
    pub aux_direction: f64,
    pub aux_overlap: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [f64; 5] {
        [self.equi, self.inst, self.aux_speed, self.aux_direction, self.aux_overlap]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().chain([&self.total]).all(|v| v.is_finite())
    }
}

/// Weighted sum of the five components `[equi, inst, speed, direction, overlap]`.
pub fn total_loss(weights: &LossWeights, components: [f64; 5]) -> LossBreakdown {
    let total = weights
        .as_array()
        .iter()
        .zip(&components)
        .filter(|(w, _)| **w != 0.0)
        .map(|(w, c)| w * c)
        .sum();
    LossBreakdown {
        equi: components[0],
        inst: components[1],
        aux_speed: components[2],
        aux_direction: components[3],
        aux_overlap: components[4],
        total,
    }
}
