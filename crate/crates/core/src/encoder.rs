//! Feed-forward encoder with a semantic head and a tanh hash head.
//!
//! Layout for widths `[d_in, h_1, .., h_m, semantic, k_half]`: the hidden
//! layers use the configured activation (rectifier by default), the semantic
//! layer is linear and its output `r` feeds the hash layer, whose
//! pre-activation is `v` and output `u = tanh(v)`.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::format::{self, Reader};
use crate::{AdsqError, Result};

const WEIGHT_MAGIC: &[u8; 8] = b"ADSQW001";

/// One affine map `y = x W^T + b`; `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Layer { weight: Array2::zeros((out, inp)), bias: Array1::zeros(out) }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        if self == Activation::Relu {
            z.mapv_inplace(|v| v.max(0.0));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
    pub hidden_activation: Activation,
}

/// Outputs of a forward pass over `n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutputs {
    /// Semantic features, `n × semantic_dim`.
    pub r: Array2<f64>,
    /// Hash-layer pre-activations, `n × k_half`.
    pub v: Array2<f64>,
    /// Binary-like codes `tanh(v)`.
    pub u: Array2<f64>,
}

/// Activations kept for the backward pass: `acts[0]` is the input and
/// `acts[i + 1]` the post-activation output of layer `i` (the last entry is
/// `r`, the hash layer is not included).
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    acts: Vec<Array2<f64>>,
    pub out: NetOutputs,
}

/// Parameter gradients, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub layers: Vec<Layer>,
}

impl EncoderParams {
    /// Glorot-uniform weights and zero biases, deterministic per seed.
    ///
    /// `dims` lists the input width, any hidden widths, the semantic width
    /// and the hash width, so it needs at least three entries.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 3 {
            return Err(AdsqError::Config(format!(
                "encoder needs input, semantic and hash widths, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(AdsqError::Config(format!("zero layer width in {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..=limit));
                Layer { weight, bias: Array1::zeros(fan_out) }
            })
            .collect();
        Ok(EncoderParams { layers, hidden_activation: Activation::Relu })
    }

    /// Wraps explicit layers after checking that their widths chain.
    pub fn from_layers(layers: Vec<Layer>, hidden_activation: Activation) -> Result<Self> {
        if layers.len() < 2 {
            return Err(AdsqError::Config("encoder needs a semantic and a hash layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(AdsqError::Config(format!("layer {i}: bias length {} != {}", l.bias.len(), l.out_dim())));
            }
            if let Some(next) = layers.get(i + 1) {
                if next.in_dim() != l.out_dim() {
                    return Err(AdsqError::Config(format!(
                        "layer {} expects {} inputs but layer {i} produces {}",
                        i + 1,
                        next.in_dim(),
                        l.out_dim()
                    )));
                }
            }
            if !l.is_finite() {
                return Err(AdsqError::Data(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(EncoderParams { layers, hidden_activation })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn semantic_dim(&self) -> usize {
        self.layers[self.layers.len() - 2].out_dim()
    }

    pub fn k_half(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.in_dim()).chain(self.layers.iter().map(Layer::out_dim)).collect()
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(AdsqError::Shape(format!(
                "input has {} columns, encoder expects {}",
                x.ncols(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<NetOutputs> {
        Ok(self.forward_trace(x)?.out)
    }

    pub fn forward_trace(&self, x: ArrayView2<'_, f64>) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len());
        acts.push(x.to_owned());
        for (i, layer) in self.layers[..last].iter().enumerate() {
            let mut z = layer.apply(acts[i].view());
            // the semantic layer (last before the hash layer) stays linear
            if i + 1 < last {
                self.hidden_activation.apply(&mut z);
            }
            acts.push(z);
        }
        let r = acts[last].clone();
        let v = self.layers[last].apply(r.view());
        let u = v.mapv(f64::tanh);
        Ok(ForwardTrace { acts, out: NetOutputs { r, v, u } })
    }

    /// Reverse-mode gradients given upstream gradients on the semantic
    /// output `r` and on the hash pre-activation `v`.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        upstream_r: ArrayView2<'_, f64>,
        upstream_v: ArrayView2<'_, f64>,
    ) -> Result<EncoderGrads> {
        let trace = self.forward_trace(x)?;
        self.backward_trace(&trace, upstream_r, upstream_v)
    }

    pub fn backward_trace(
        &self,
        trace: &ForwardTrace,
        upstream_r: ArrayView2<'_, f64>,
        upstream_v: ArrayView2<'_, f64>,
    ) -> Result<EncoderGrads> {
        if upstream_r.dim() != trace.out.r.dim() || upstream_v.dim() != trace.out.v.dim() {
            return Err(AdsqError::Shape(format!(
                "upstream gradients {:?}/{:?} do not match outputs {:?}/{:?}",
                upstream_r.dim(),
                upstream_v.dim(),
                trace.out.r.dim(),
                trace.out.v.dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());

        // hash layer
        let dv = upstream_v;
        grads.push(Layer { weight: dv.t().dot(&trace.acts[last]), bias: dv.sum_axis(Axis(0)) });
        let mut delta = dv.dot(&self.layers[last].weight);
        delta += &upstream_r;

        for i in (0..last).rev() {
            // delta is dL/d(output of layer i); undo the activation
            if i + 1 < last && self.hidden_activation == Activation::Relu {
                Zip::from(&mut delta).and(&trace.acts[i + 1]).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            grads.push(Layer { weight: delta.t().dot(&trace.acts[i]), bias: delta.sum_axis(Axis(0)) });
            if i > 0 {
                delta = delta.dot(&self.layers[i].weight);
            }
        }
        grads.reverse();
        Ok(EncoderGrads { layers: grads })
    }

    /// Serializes as `ADSQW001`: layer count, then per layer rows, cols,
    /// row-major binary64 weights and binary64 biases.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        write_layers(&self.layers)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        EncoderParams::from_layers(read_layers(buf)?, Activation::Relu)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        format::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        EncoderParams::from_bytes(&format::read_file(path)?).map_err(|e| e.context(path.display()))
    }
}

pub(crate) fn write_layers(layers: &[Layer]) -> Result<Vec<u8>> {
    let count = format::to_u32(layers.len(), "layer count")?;
    let size: usize = layers.iter().map(|l| 8 + 8 * (l.weight.len() + l.bias.len())).sum();
    let mut out = format::header(WEIGHT_MAGIC, &[count], size);
    for l in layers {
        out.extend_from_slice(&format::to_u32(l.out_dim(), "rows")?.to_le_bytes());
        out.extend_from_slice(&format::to_u32(l.in_dim(), "cols")?.to_le_bytes());
        for w in l.weight.iter() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for b in l.bias.iter() {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) fn read_layers(buf: &[u8]) -> Result<Vec<Layer>> {
    let mut r = Reader::new(buf, WEIGHT_MAGIC, "weight file")?;
    let count = r.u32()?;
    let mut layers = Vec::new();
    for _ in 0..count {
        let rows = r.u32()?;
        let cols = r.u32()?;
        let len = r.payload_len(rows, cols, 8)? / 8;
        let mut w = Vec::with_capacity(len);
        for _ in 0..len {
            w.push(r.f64()?);
        }
        let mut b = Vec::with_capacity(rows as usize);
        for _ in 0..rows {
            b.push(r.f64()?);
        }
        let weight = Array2::from_shape_vec((rows as usize, cols as usize), w)
            .map_err(|e| AdsqError::Format(e.to_string()))?;
        layers.push(Layer { weight, bias: Array1::from(b) });
    }
    r.finish()?;
    Ok(layers)
}

/// Momentum SGD with L2 weight decay:
/// `vel <- momentum * vel + grad + decay * param; param <- param - lr * vel`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumSgd {
    velocity: Vec<Layer>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl MomentumSgd {
    pub fn new(layers: &[Layer], momentum: f64, weight_decay: f64) -> Self {
        MomentumSgd {
            velocity: layers.iter().map(|l| Layer::zeros(l.out_dim(), l.in_dim())).collect(),
            momentum,
            weight_decay,
        }
    }

    /// Applies one update. A non-finite gradient aborts before any
    /// parameter is touched.
    pub fn step(&mut self, params: &mut [Layer], grads: &[Layer], lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(AdsqError::Argument(format!("learning rate must be > 0, got {lr}")));
        }
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(AdsqError::Shape("parameter, gradient and velocity layer counts differ".into()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.weight.dim() != g.weight.dim() || p.bias.dim() != g.bias.dim() {
                return Err(AdsqError::Shape(format!("layer {i}: gradient shape mismatch")));
            }
            if !g.is_finite() {
                return Err(AdsqError::Training(format!("non-finite gradient in layer {i}")));
            }
        }
        let (m, wd) = (self.momentum, self.weight_decay);
        for ((p, g), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            Zip::from(&mut p.weight).and(&g.weight).and(&mut vel.weight).for_each(|p, &g, v| {
                *v = m * *v + g + wd * *p;
                *p -= lr * *v;
            });
            Zip::from(&mut p.bias).and(&g.bias).and(&mut vel.bias).for_each(|p, &g, v| {
                *v = m * *v + g + wd * *p;
                *p -= lr * *v;
            });
        }
        Ok(())
    }
}
