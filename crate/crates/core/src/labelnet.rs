//! LabelNet: embeds multi-hot label vectors into semantic features and
//! binary-like codes that later supervise the image networks.
//!
//! Objective over the ordered pairs `i != j` of a batch:
//!
//! ```text
//! L = alpha * J1 + beta * J2 + gamma * J3 + delta * J4
//! J1 = sum softplus(Lam_ij) - s_ij * Lam_ij,  Lam_ij = r_i . r_j / 2
//! J2 = sum softplus(Th_ij) - s_ij * Th_ij,    Th_ij = w_i . w_j / 2
//! J3 = sum (|| |w_i| - 1 ||_1 + || |w_j| - 1 ||_1)
//! J4 = || W w + b - l ||_F^2
//! ```

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{minibatches, Dataset, HyperParams, SimilarityMatrix};
use crate::encoder::{EncoderParams, Layer, MomentumSgd, NetOutputs};
use crate::format::{self, Reader};
use crate::numerics::{logistic_nll, sigmoid};
use crate::{AdsqError, Result};

const SUPERVISION_MAGIC: &[u8; 8] = b"ADSQS001";

/// Per-term values of a loss. `j1..j4` and `asym` are unweighted; `total`
/// is the weighted sum actually optimized.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub j1: f64,
    pub j2: f64,
    pub j3: f64,
    pub j4: f64,
    pub asym: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.j1 += other.j1;
        self.j2 += other.j2;
        self.j3 += other.j3;
        self.j4 += other.j4;
        self.asym += other.asym;
        self.total += other.total;
    }

    /// Fails with a training error naming the first non-finite term.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        for (name, v) in [
            ("J1", self.j1),
            ("J2", self.j2),
            ("J3", self.j3),
            ("J4", self.j4),
            ("asymmetric term", self.asym),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(AdsqError::Training(format!("{what}: {name} is {v}")));
            }
        }
        Ok(())
    }
}

/// Linear classifier `l~ = W w + b` on the label-net codes; `weight` is
/// `classes × k_half`.
pub type ClassifierHead = Layer;

/// Cached LabelNet outputs for every training item.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSupervision {
    pub r: Array2<f64>,
    pub omega: Array2<f64>,
    /// Number of label-net epochs trained when the cache was taken.
    pub epoch: usize,
}

impl LabelSupervision {
    pub fn n(&self) -> usize {
        self.r.nrows()
    }

    /// `ADSQS001`: n, semantic_dim, k_half, then r and w as binary64.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let fields = [
            format::to_u32(self.r.nrows(), "n")?,
            format::to_u32(self.r.ncols(), "semantic_dim")?,
            format::to_u32(self.omega.ncols(), "k_half")?,
        ];
        let mut out = format::header(SUPERVISION_MAGIC, &fields, 8 * (self.r.len() + self.omega.len()));
        for v in self.r.iter().chain(self.omega.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(buf, SUPERVISION_MAGIC, "supervision file")?;
        let n = rd.u32()?;
        let sem = rd.u32()?;
        let k = rd.u32()?;
        let mut read = |cols: u32| -> Result<Array2<f64>> {
            let len = rd.payload_len(n, cols, 8)? / 8;
            let v = (0..len).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
            Array2::from_shape_vec((n as usize, cols as usize), v).map_err(|e| AdsqError::Format(e.to_string()))
        };
        let r = read(sem)?;
        let omega = read(k)?;
        rd.finish()?;
        Ok(LabelSupervision { r, omega, epoch: 0 })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        format::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        LabelSupervision::from_bytes(&format::read_file(path.as_ref())?)
    }
}

/// Gradients of the label-net objective with respect to its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrads {
    pub r: Array2<f64>,
    pub omega: Array2<f64>,
    pub head: Layer,
}

/// Value and derivative of one entry of the quantization penalty.
///
/// Magnitude form `| |w| - 1 |`, or the verbatim `|w - 1|` when `literal`.
/// Kinks take a zero subgradient.
#[inline]
pub(crate) fn quantization_penalty(w: f64, literal: bool) -> (f64, f64) {
    if literal {
        let d = w - 1.0;
        (d.abs(), sign0(d))
    } else {
        let d = w.abs() - 1.0;
        (d.abs(), sign0(d) * sign0(w))
    }
}

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Negative log-likelihood over ordered pairs `i != j` with logits
/// `Lam = a b^T / 2`, plus `G = sigma(Lam) - s` (zero diagonal), the
/// gradient with respect to `Lam`.
pub(crate) fn pairwise_nll(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, s: ArrayView2<'_, f64>) -> (f64, Array2<f64>) {
    let mut logits = a.dot(&b.t());
    logits *= 0.5;
    let mut value = 0.0;
    Zip::indexed(&mut logits).and(s).for_each(|(i, j), lam, &sij| {
        if i == j {
            *lam = 0.0;
        } else {
            value += logistic_nll(sij, *lam);
            *lam = sigmoid(*lam) - sij;
        }
    });
    (value, logits)
}

fn check_inputs(outs: &NetOutputs, head: &Layer, s: ArrayView2<'_, f64>, labels: ArrayView2<'_, f64>) -> Result<()> {
    let n = outs.r.nrows();
    if s.dim() != (n, n) || outs.u.nrows() != n || labels.nrows() != n {
        return Err(AdsqError::Shape(format!(
            "batch of {n} items, similarity {:?}, labels {:?}",
            s.dim(),
            labels.dim()
        )));
    }
    if head.in_dim() != outs.u.ncols() || head.out_dim() != labels.ncols() {
        return Err(AdsqError::Shape(format!(
            "classifier head {:?} vs codes width {} and {} classes",
            head.weight.dim(),
            outs.u.ncols(),
            labels.ncols()
        )));
    }
    Ok(())
}

/// Label-net loss and its gradients with respect to `r`, `w` and the head.
///
/// `s` is the binary similarity block of the batch, `labels` the 0/1 label
/// rows. Pair sums run over ordered pairs `i != j`.
pub fn labelnet_loss_and_grad(
    outs: &NetOutputs,
    head: &ClassifierHead,
    s: ArrayView2<'_, f64>,
    labels: ArrayView2<'_, f64>,
    h: &HyperParams,
) -> Result<(LossBreakdown, LabelGrads)> {
    check_inputs(outs, head, s, labels)?;
    let n = outs.r.nrows();
    let omega = &outs.u;

    let (j1, g1) = pairwise_nll(outs.r.view(), outs.r.view(), s);
    let (j2, g2) = pairwise_nll(omega.view(), omega.view(), s);
    // d/dx_i of sum_ij G_ij x_i.x_j / 2 is ((G + G^T) / 2) x
    let grad_r = sym_half(&g1).dot(&outs.r) * h.alpha;
    let mut grad_omega = sym_half(&g2).dot(omega) * h.beta;

    // every item takes part in 2(n-1) ordered pairs
    let mult = 2.0 * (n as f64 - 1.0);
    let mut j3 = 0.0;
    Zip::from(&mut grad_omega).and(omega).for_each(|g, &w| {
        let (val, der) = quantization_penalty(w, h.j3_literal);
        j3 += mult * val;
        *g += h.gamma * mult * der;
    });

    let mut diff = omega.dot(&head.weight.t());
    diff += &head.bias;
    diff -= &labels;
    let j4 = diff.iter().map(|d| d * d).sum::<f64>();
    let head_grad = Layer {
        weight: diff.t().dot(omega) * (2.0 * h.delta),
        bias: diff.sum_axis(Axis(0)) * (2.0 * h.delta),
    };
    grad_omega.scaled_add(2.0 * h.delta, &diff.dot(&head.weight));

    let total = h.alpha * j1 + h.beta * j2 + h.gamma * j3 + h.delta * j4;
    let loss = LossBreakdown { j1, j2, j3, j4, asym: 0.0, total };
    loss.check_finite("label-net loss")?;
    Ok((loss, LabelGrads { r: grad_r, omega: grad_omega, head: head_grad }))
}

/// Label-net loss only.
pub fn labelnet_loss(
    outs: &NetOutputs,
    head: &ClassifierHead,
    s: ArrayView2<'_, f64>,
    labels: ArrayView2<'_, f64>,
    h: &HyperParams,
) -> Result<LossBreakdown> {
    labelnet_loss_and_grad(outs, head, s, labels, h).map(|(l, _)| l)
}

/// Label-net gradients only.
pub fn labelnet_grad(
    outs: &NetOutputs,
    head: &ClassifierHead,
    s: ArrayView2<'_, f64>,
    labels: ArrayView2<'_, f64>,
    h: &HyperParams,
) -> Result<LabelGrads> {
    labelnet_loss_and_grad(outs, head, s, labels, h).map(|(_, g)| g)
}

fn sym_half(g: &Array2<f64>) -> Array2<f64> {
    (g + &g.t()) * 0.5
}

/// Label network, classifier head and their optimizer state.
#[derive(Debug, Clone)]
pub struct LabelNet {
    pub encoder: EncoderParams,
    pub head: ClassifierHead,
    enc_opt: MomentumSgd,
    head_opt: MomentumSgd,
    pub epochs_trained: usize,
}

impl LabelNet {
    pub fn new(classes: usize, h: &HyperParams, seed: u64) -> Result<Self> {
        let mut dims = vec![classes];
        dims.extend(&h.label_hidden);
        dims.extend([h.semantic_dim, h.k_half]);
        let encoder = EncoderParams::init(&dims, seed)?;
        // the head is the last layer of a [k_half, classes, 1] stub
        let head_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
        let head = EncoderParams::init(&[h.k_half, classes, 1], head_seed)?.layers.swap_remove(0);
        Ok(Self::from_parts(encoder, head, h))
    }

    pub fn from_parts(encoder: EncoderParams, head: ClassifierHead, h: &HyperParams) -> Self {
        let enc_opt = MomentumSgd::new(&encoder.layers, h.momentum, h.weight_decay);
        let head_opt = MomentumSgd::new(std::slice::from_ref(&head), h.momentum, h.weight_decay);
        LabelNet { encoder, head, enc_opt, head_opt, epochs_trained: 0 }
    }

    /// Loss over a set of items, without updating anything.
    pub fn loss_on(&self, labels: ArrayView2<'_, f64>, s: &SimilarityMatrix, idx: &[usize], h: &HyperParams) -> Result<LossBreakdown> {
        let rows = labels.select(Axis(0), idx);
        let outs = self.encoder.forward(rows.view())?;
        labelnet_loss(&outs, &self.head, s.binary_block(idx).view(), rows.view(), h)
    }

    /// One pass over shuffled minibatches; returns the summed batch losses.
    pub fn train_epoch(
        &mut self,
        labels: ArrayView2<'_, f64>,
        s: &SimilarityMatrix,
        h: &HyperParams,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossBreakdown> {
        let mut epoch_loss = LossBreakdown::default();
        for batch in minibatches(labels.nrows(), h.batch_size, rng) {
            let rows = labels.select(Axis(0), &batch);
            let trace = self.encoder.forward_trace(rows.view())?;
            let (loss, g) = labelnet_loss_and_grad(&trace.out, &self.head, s.binary_block(&batch).view(), rows.view(), h)?;
            let up_v = &g.omega * &trace.out.u.mapv(|w| 1.0 - w * w);
            let grads = self.encoder.backward_trace(&trace, g.r.view(), up_v.view())?;
            self.enc_opt.step(&mut self.encoder.layers, &grads.layers, lr)?;
            self.head_opt.step(std::slice::from_mut(&mut self.head), std::slice::from_ref(&g.head), lr)?;
            epoch_loss.accumulate(&loss);
        }
        self.epochs_trained += 1;
        Ok(epoch_loss)
    }

    /// Full forward pass over all items.
    pub fn supervision(&self, labels: ArrayView2<'_, f64>) -> Result<LabelSupervision> {
        let out = self.encoder.forward(labels)?;
        Ok(LabelSupervision { r: out.r, omega: out.u, epoch: self.epochs_trained })
    }
}

/// Runs `epochs` label-net epochs, then caches supervision for every item.
///
/// Returns the per-epoch summed losses alongside the cache.
pub fn train_labelnet(
    net: &mut LabelNet,
    dataset: &Dataset,
    s: &SimilarityMatrix,
    h: &HyperParams,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(Vec<LossBreakdown>, LabelSupervision)> {
    let labels = dataset.labels_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let loss = net
            .train_epoch(labels.view(), s, h, lr, &mut rng)
            .map_err(|e| e.context(format_args!("label-net epoch {epoch}")))?;
        history.push(loss);
    }
    Ok((history, net.supervision(labels.view())?))
}
