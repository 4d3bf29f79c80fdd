use crate::encoder::Encoder;
use crate::error::Result;
use crate::nn::{Matrix, Module, Scalar};
use crate::objectives::{cross_entropy, grouped_nce, total_loss, LossBreakdown, LossWeights, NceOutput};

use super::plan::Batch;

/// Detached codes used as the positive/negative side of the contrastive terms.
#[derive(Clone, Debug)]
pub struct Targets<F> {
    pub psi: Option<Matrix<F>>,
    pub phi: Option<Matrix<F>>,
}

/// Loss settings shared by every step.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveSetup {
    /// Effective weights; a zero weight skips the component entirely.
    pub weights: LossWeights,
    pub temperature: f64,
}

fn pair_inputs<F: Scalar>(e: &Matrix<F>, pairs: &[(usize, usize)]) -> Matrix<F> {
    let (p, q): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    Matrix::hconcat(&e.select_rows(&p), &e.select_rows(&q))
}

fn scale<F: Scalar>(mut g: Matrix<F>, w: f64) -> Matrix<F> {
    let w = F::from_f64(w);
    g.data.iter_mut().for_each(|v| *v *= w);
    g
}

fn add_rows<F: Scalar>(acc: &mut Matrix<F>, rows: &[usize], src: &Matrix<F>, col0: usize) {
    for (r, &dst) in rows.iter().enumerate() {
        let s = &src.row(r)[col0..col0 + acc.cols];
        for (a, b) in acc.row_mut(dst).iter_mut().zip(s) {
            *a += *b;
        }
    }
}

/// One shared forward pass through backbone, projections and heads.
///
/// With `backward`, gradients of the weighted total are accumulated into the
/// model (after zeroing). `frozen` substitutes the detached side of both
/// contrastive losses; without it the current codes are used, which is what
/// training does. The returned targets are the codes of this pass.
pub fn forward_backward<F: Scalar>(
    model: &mut Encoder<F>,
    batch: &Batch<F>,
    setup: &ObjectiveSetup,
    frozen: Option<&Targets<F>>,
    backward: bool,
) -> Result<(LossBreakdown, Targets<F>)> {
    model.check_clips(&batch.clips)?;
    if backward {
        model.zero_grad();
    }
    let w = setup.weights;
    let l = &batch.layout;
    let e = model.backbone.forward(&batch.clips, true);
    let d = e.cols;
    let mut de = Matrix::<F>::zeros(e.rows, d);
    let mut comps = [0.0; 5];
    let mut targets = Targets { psi: None, phi: None };
    let (p_rows, q_rows): (Vec<usize>, Vec<usize>) = l.pairs.iter().copied().unzip();

    if w.equi > 0.0 {
        let x = pair_inputs(&e, &l.pairs);
        let codes = model.psi.forward(&x, backward);
        let tgt = frozen.and_then(|f| f.psi.as_ref()).unwrap_or(&codes);
        let NceOutput { loss, grad } = grouped_nce(&codes, tgt, &l.pair_groups, setup.temperature)?;
        comps[0] = loss;
        if backward {
            let dx = model.psi.backward(&scale(grad, w.equi));
            add_rows(&mut de, &p_rows, &dx, 0);
            add_rows(&mut de, &q_rows, &dx, d);
        }
        targets.psi = Some(codes);
    }
    if w.inst > 0.0 {
        let codes = model.phi.forward(&e, backward);
        let tgt = frozen.and_then(|f| f.phi.as_ref()).unwrap_or(&codes);
        let NceOutput { loss, grad } = grouped_nce(&codes, tgt, &l.instance_ids, setup.temperature)?;
        comps[1] = loss;
        if backward {
            let dx = model.phi.backward(&scale(grad, w.inst));
            de.data.iter_mut().zip(&dx.data).for_each(|(a, b)| *a += *b);
        }
        targets.phi = Some(codes);
    }
    if w.speed > 0.0 {
        let logits = model.speed_head.forward(&e, backward);
        let out = cross_entropy(&logits, &l.speed_labels)?;
        comps[2] = out.loss;
        if backward {
            let dx = model.speed_head.backward(&scale(out.grad, w.speed));
            de.data.iter_mut().zip(&dx.data).for_each(|(a, b)| *a += *b);
        }
    }
    if w.direction > 0.0 {
        let logits = model.direction_head.forward(&e, backward);
        let out = cross_entropy(&logits, &l.direction_labels)?;
        comps[3] = out.loss;
        if backward {
            let dx = model.direction_head.backward(&scale(out.grad, w.direction));
            de.data.iter_mut().zip(&dx.data).for_each(|(a, b)| *a += *b);
        }
    }
    if w.overlap > 0.0 {
        let x = pair_inputs(&e, &l.pairs);
        let logits = model.overlap_head.forward(&x, backward);
        let out = cross_entropy(&logits, &l.overlap_labels)?;
        comps[4] = out.loss;
        if backward {
            let dx = model.overlap_head.backward(&scale(out.grad, w.overlap));
            add_rows(&mut de, &p_rows, &dx, 0);
            add_rows(&mut de, &q_rows, &dx, d);
        }
    }
    let breakdown = total_loss(&w, comps);
    if backward && breakdown.is_finite() {
        model.backbone.backward(&de);
    }
    Ok((breakdown, targets))
}
