//! ImgNet objective and the W-step.
//!
//! For a batch with tanh codes `U`, semantic features `R`, label-net
//! supervision `(R^l, W^l)` and fixed discrete codes `B`:
//!
//! ```text
//! L = alpha * J1 + beta * J2 + eta * J3 + nu * J4 + A
//! J1 = sum_{i != j} softplus(Lam_ij) - s_ij Lam_ij,  Lam_ij = r^l_i . r_j / 2
//! J2 = sum_{i != j} softplus(Th_ij)  - s_ij Th_ij,   Th_ij  = w^l_i . u_j / 2
//! J3 = ||U - B||_F^2
//! J4 = ||U^T 1||^2
//! A  = ||U B^T - k_half * S_signed||_F^2        (all i, j including i = j)
//! ```
//!
//! The ablation variants zero `A` and/or `alpha * J1`.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand_chacha::ChaCha8Rng;

use crate::bstep::CodeMatrix;
use crate::data::{minibatches, HyperParams, SimilarityMatrix};
use crate::encoder::{EncoderParams, MomentumSgd, NetOutputs};
use crate::labelnet::{pairwise_nll, LabelSupervision, LossBreakdown};
use crate::trainer::{variant_loss_mask, Variant};
use crate::{AdsqError, Result};

/// Row-aligned inputs of the ImgNet objective for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ImgBatchContext {
    pub u: Array2<f64>,
    pub r: Array2<f64>,
    pub sup_r: Array2<f64>,
    pub sup_omega: Array2<f64>,
    pub b: Array2<f64>,
    pub s_binary: Array2<f64>,
    pub s_signed: Array2<f64>,
}

impl ImgBatchContext {
    /// Gathers the batch rows `idx` from full-set arrays. `outs` must
    /// already be the network outputs of those rows.
    pub fn gather(outs: &NetOutputs, sup: &LabelSupervision, b: &CodeMatrix, s: &SimilarityMatrix, idx: &[usize]) -> Result<Self> {
        if outs.u.nrows() != idx.len() {
            return Err(AdsqError::Shape(format!("{} output rows for {} batch indices", outs.u.nrows(), idx.len())));
        }
        let s_binary = s.binary_block(idx);
        Self::from_parts(
            outs.u.clone(),
            outs.r.clone(),
            sup.r.select(Axis(0), idx),
            sup.omega.select(Axis(0), idx),
            b.codes().select(Axis(0), idx),
            s_binary,
        )
    }

    /// Builds a context from explicit matrices, checking row alignment,
    /// widths and the domains of `B` and `S`.
    pub fn from_parts(
        u: Array2<f64>,
        r: Array2<f64>,
        sup_r: Array2<f64>,
        sup_omega: Array2<f64>,
        b: Array2<f64>,
        s_binary: Array2<f64>,
    ) -> Result<Self> {
        let m = u.nrows();
        let rows = [r.nrows(), sup_r.nrows(), sup_omega.nrows(), b.nrows(), s_binary.nrows(), s_binary.ncols()];
        if rows.iter().any(|&x| x != m) {
            return Err(AdsqError::Shape(format!("batch rows not aligned: u has {m}, others {rows:?}")));
        }
        if b.ncols() != u.ncols() || sup_omega.ncols() != u.ncols() || sup_r.ncols() != r.ncols() {
            return Err(AdsqError::Shape(format!(
                "widths: u {}, b {}, w^l {}, r {}, r^l {}",
                u.ncols(),
                b.ncols(),
                sup_omega.ncols(),
                r.ncols(),
                sup_r.ncols()
            )));
        }
        if b.iter().any(|&x| x != 1.0 && x != -1.0) {
            return Err(AdsqError::Domain("code entries must be exactly +1 or -1".into()));
        }
        if s_binary.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(AdsqError::Domain("similarity entries must be 0 or 1".into()));
        }
        let s_signed = s_binary.mapv(|x| 2.0 * x - 1.0);
        Ok(ImgBatchContext { u, r, sup_r, sup_omega, b, s_binary, s_signed })
    }

    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.u.nrows() == 0
    }
}

/// Gradients of the ImgNet objective with respect to the hash
/// pre-activations `v` and the semantic features `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImgGrads {
    pub v: Array2<f64>,
    pub r: Array2<f64>,
}

/// ImgNet loss and exact gradients.
///
/// The `v` gradient is `g_i * (1 - u_i^2)` with
///
/// ```text
/// g_i = 2 sum_j (b_j.u_i - K S_ij) b_j + (beta/2) sum_j (sigma(Th_ji) - s_ji) w^l_j
///     + 2 eta (u_i - b_i) + 2 nu sum_j u_j
/// ```
///
/// (`S` signed, `s` binary). The J1 term reaches the network through the
/// semantic head instead.
pub fn imgnet_loss_and_grad(ctx: &ImgBatchContext, h: &HyperParams, variant: Variant) -> Result<(LossBreakdown, ImgGrads)> {
    let mask = variant_loss_mask(variant);
    let alpha = h.alpha * mask.semantic;
    let k = ctx.u.ncols() as f64;
    let u = &ctx.u;

    // J1: logits r^l_i . r_j / 2; d/dr_j = sum_i G_ij r^l_i / 2
    let (j1, g1) = pairwise_nll(ctx.sup_r.view(), ctx.r.view(), ctx.s_binary.view());
    let grad_r = g1.t().dot(&ctx.sup_r) * (0.5 * alpha);

    // J2: logits w^l_i . u_j / 2
    let (j2, g2) = pairwise_nll(ctx.sup_omega.view(), u.view(), ctx.s_binary.view());
    let mut grad_u = g2.t().dot(&ctx.sup_omega) * (0.5 * h.beta);

    // J3
    let diff = u - &ctx.b;
    let j3 = diff.iter().map(|d| d * d).sum::<f64>();
    grad_u.scaled_add(2.0 * h.eta, &diff);

    // J4: bit balance
    let col = u.sum_axis(Axis(0));
    let j4 = col.iter().map(|c| c * c).sum::<f64>();
    grad_u += &(&col * (2.0 * h.nu));

    // asymmetric term; reported as 0 when the variant masks it
    let mut asym = 0.0;
    if mask.asym != 0.0 {
        let mut resid = u.dot(&ctx.b.t());
        resid.scaled_add(-k, &ctx.s_signed);
        asym = resid.iter().map(|e| e * e).sum::<f64>();
        grad_u.scaled_add(2.0 * mask.asym, &resid.dot(&ctx.b));
    }

    Zip::from(&mut grad_u).and(u).for_each(|g, &x| *g *= 1.0 - x * x);

    let total = alpha * j1 + h.beta * j2 + h.eta * j3 + h.nu * j4 + mask.asym * asym;
    let loss = LossBreakdown { j1, j2, j3, j4, asym, total };
    loss.check_finite("img-net loss")?;
    Ok((loss, ImgGrads { v: grad_u, r: grad_r }))
}

pub fn imgnet_loss(ctx: &ImgBatchContext, h: &HyperParams, variant: Variant) -> Result<LossBreakdown> {
    imgnet_loss_and_grad(ctx, h, variant).map(|(l, _)| l)
}

/// Gradient with respect to the hash pre-activations.
pub fn grad_v(ctx: &ImgBatchContext, h: &HyperParams, variant: Variant) -> Result<Array2<f64>> {
    imgnet_loss_and_grad(ctx, h, variant).map(|(_, g)| g.v)
}

/// One image network with its optimizer state.
#[derive(Debug, Clone)]
pub struct ImgNet {
    pub encoder: EncoderParams,
    opt: MomentumSgd,
}

impl ImgNet {
    pub fn new(encoder: EncoderParams, h: &HyperParams) -> Self {
        let opt = MomentumSgd::new(&encoder.layers, h.momentum, h.weight_decay);
        ImgNet { encoder, opt }
    }

    /// One W-step epoch over shuffled minibatches with `B` held fixed.
    /// Returns the summed batch losses.
    #[allow(clippy::too_many_arguments)]
    pub fn wstep_epoch(
        &mut self,
        features: ArrayView2<'_, f64>,
        s: &SimilarityMatrix,
        b: &CodeMatrix,
        sup: &LabelSupervision,
        h: &HyperParams,
        variant: Variant,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossBreakdown> {
        check_full_set(features, s, b, sup)?;
        let mut epoch_loss = LossBreakdown::default();
        for batch in minibatches(features.nrows(), h.batch_size, rng) {
            let x = features.select(Axis(0), &batch);
            let trace = self.encoder.forward_trace(x.view())?;
            let ctx = ImgBatchContext::gather(&trace.out, sup, b, s, &batch)?;
            let (loss, g) = imgnet_loss_and_grad(&ctx, h, variant)?;
            let grads = self.encoder.backward_trace(&trace, g.r.view(), g.v.view())?;
            self.opt.step(&mut self.encoder.layers, &grads.layers, lr)?;
            epoch_loss.accumulate(&loss);
        }
        Ok(epoch_loss)
    }
}

fn check_full_set(features: ArrayView2<'_, f64>, s: &SimilarityMatrix, b: &CodeMatrix, sup: &LabelSupervision) -> Result<()> {
    let n = features.nrows();
    if s.n() != n || b.n() != n || sup.n() != n {
        return Err(AdsqError::Shape(format!(
            "training set has {n} items but S covers {}, B {}, supervision {}",
            s.n(),
            b.n(),
            sup.n()
        )));
    }
    Ok(())
}

/// The ImgNet objective evaluated with every training item in one batch.
pub fn imgnet_objective(
    encoder: &EncoderParams,
    features: ArrayView2<'_, f64>,
    s: &SimilarityMatrix,
    b: &CodeMatrix,
    sup: &LabelSupervision,
    h: &HyperParams,
    variant: Variant,
) -> Result<LossBreakdown> {
    check_full_set(features, s, b, sup)?;
    let outs = encoder.forward(features)?;
    let idx: Vec<usize> = (0..features.nrows()).collect();
    let ctx = ImgBatchContext::gather(&outs, sup, b, s, &idx)?;
    imgnet_loss(&ctx, h, variant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ctx_simple(u: Array2<f64>, b: Array2<f64>, s: Array2<f64>) -> ImgBatchContext {
        let m = u.nrows();
        let k = u.ncols();
        ImgBatchContext::from_parts(u, Array2::zeros((m, 1)), Array2::zeros((m, 1)), Array2::zeros((m, k)), b, s).unwrap()
    }

    #[test]
    fn quantization_term_near_codes() {
        let b = array![[1.0, -1.0, 1.0], [-1.0, -1.0, 1.0]];
        let ctx = ctx_simple(&b * 0.999, b, array![[1.0, 0.0], [0.0, 1.0]]);
        let l = imgnet_loss(&ctx, &HyperParams::default(), Variant::Full).unwrap();
        assert!((l.j3 - 2.0 * 3.0 * 1e-6).abs() < 1e-15);
    }

    #[test]
    fn balanced_bits_have_zero_balance_term() {
        let u = array![[1.0, -1.0], [-1.0, 1.0]] * 0.9;
        let ctx = ctx_simple(u, array![[1.0, -1.0], [-1.0, 1.0]], array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(imgnet_loss(&ctx, &HyperParams::default(), Variant::Full).unwrap().j4, 0.0);
    }

    #[test]
    fn asymmetric_term_single_item() {
        let ctx = ctx_simple(array![[0.5]], array![[1.0]], array![[1.0]]);
        let l = imgnet_loss(&ctx, &HyperParams::default(), Variant::Full).unwrap();
        assert_eq!(l.asym, 0.25);
    }

    #[test]
    fn reduced_gradient_formulas() {
        // pair terms off (alpha = beta = 0, no asymmetric term), nu = 0
        let h = HyperParams { alpha: 0.0, beta: 0.0, nu: 0.0, eta: 3.0, ..HyperParams::default() };
        let b = array![[1.0, -1.0], [-1.0, -1.0], [1.0, 1.0]];
        let ctx = ctx_simple(Array2::zeros((3, 2)), b.clone(), Array2::eye(3));
        let g = grad_v(&ctx, &h, Variant::NoAsym).unwrap();
        assert_eq!(g, &b * (-2.0 * h.eta));

        let u = &b * 0.8;
        let ctx = ctx_simple(u.clone(), b.clone(), Array2::eye(3));
        let g = grad_v(&ctx, &h, Variant::NoAsym).unwrap();
        let expect = (&u - &b) * (2.0 * h.eta) * u.mapv(|x| 1.0 - x * x);
        assert!((&g - &expect).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn rejects_non_binary_codes() {
        let r = ImgBatchContext::from_parts(
            Array2::zeros((1, 1)),
            Array2::zeros((1, 1)),
            Array2::zeros((1, 1)),
            Array2::zeros((1, 1)),
            array![[0.0]],
            array![[1.0]],
        );
        assert!(matches!(r, Err(AdsqError::Domain(_))));
    }

    #[test]
    fn masked_variant_drops_terms_from_total() {
        let b = array![[1.0, -1.0], [-1.0, 1.0]];
        let ctx = ImgBatchContext::from_parts(
            array![[0.3, -0.2], [0.1, 0.4]],
            array![[0.5, 0.1], [-0.3, 0.2]],
            array![[0.2, 0.2], [0.4, -0.1]],
            array![[0.9, -0.8], [-0.7, 0.6]],
            b,
            array![[1.0, 0.0], [0.0, 1.0]],
        )
        .unwrap();
        let h = HyperParams::default();
        let full = imgnet_loss(&ctx, &h, Variant::Full).unwrap();
        let both = imgnet_loss(&ctx, &h, Variant::NoBoth).unwrap();
        let expect = h.beta * full.j2 + h.eta * full.j3 + h.nu * full.j4;
        assert!((both.total - expect).abs() < 1e-12);
        assert_eq!(both.asym, 0.0);
        let sum = h.alpha * full.j1 + h.beta * full.j2 + h.eta * full.j3 + h.nu * full.j4 + full.asym;
        assert!((full.total - sum).abs() < 1e-12);
    }
}
