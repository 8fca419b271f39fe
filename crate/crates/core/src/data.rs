//! Datasets, the pairwise similarity matrix and run configuration.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::format::{self, Reader};
use crate::trainer::Variant;
use crate::{AdsqError, Result};

const FEATURE_MAGIC: &[u8; 8] = b"ADSQF001";
const LABEL_MAGIC: &[u8; 8] = b"ADSQL001";

/// Feature vectors and multi-hot labels for the same `n` items.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Array2<u8>,
}

impl Dataset {
    /// Builds a dataset after checking shapes, finiteness and that every
    /// label row has at least one positive entry.
    pub fn new(features: Array2<f64>, labels: Array2<u8>) -> Result<Self> {
        if features.nrows() != labels.nrows() {
            return Err(AdsqError::Shape(format!(
                "{} feature rows vs {} label rows",
                features.nrows(),
                labels.nrows()
            )));
        }
        check_features(features.view())?;
        check_labels(labels.view())?;
        Ok(Dataset { features, labels })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> ArrayView2<'_, u8> {
        self.labels.view()
    }

    /// Labels as a 0/1 real matrix, the LabelNet input.
    pub fn labels_f64(&self) -> Array2<f64> {
        self.labels.mapv(f64::from)
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn classes(&self) -> usize {
        self.labels.ncols()
    }
}

fn check_features(x: ArrayView2<'_, f64>) -> Result<()> {
    if let Some(((i, j), v)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(AdsqError::Data(format!("non-finite feature {v} at ({i}, {j})")));
    }
    Ok(())
}

fn check_labels(l: ArrayView2<'_, u8>) -> Result<()> {
    if let Some(((i, j), v)) = l.indexed_iter().find(|(_, v)| **v > 1) {
        return Err(AdsqError::Format(format!("label value {v} at ({i}, {j}) is not 0 or 1")));
    }
    if let Some((i, _)) = l.outer_iter().enumerate().find(|(_, row)| row.iter().all(|&v| v == 0)) {
        return Err(AdsqError::Data(format!("label row {i} has no positive label")));
    }
    Ok(())
}

/// Reads an `ADSQF001` feature file.
pub fn load_features(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    decode_features(&format::read_file(path)?).map_err(|e| e.context(path.display()))
}

pub fn decode_features(buf: &[u8]) -> Result<Array2<f64>> {
    let mut r = Reader::new(buf, FEATURE_MAGIC, "feature file")?;
    let n = r.u32()?;
    let d = r.u32()?;
    let len = r.payload_len(n, d, 4)?;
    let mut values = Vec::with_capacity(len / 4);
    for _ in 0..len / 4 {
        values.push(f64::from(r.f32()?));
    }
    r.finish()?;
    let x = Array2::from_shape_vec((n as usize, d as usize), values)
        .map_err(|e| AdsqError::Format(e.to_string()))?;
    check_features(x.view())?;
    Ok(x)
}

/// Encodes features as `ADSQF001`. Values are narrowed to binary32.
pub fn encode_features(x: ArrayView2<'_, f64>) -> Result<Vec<u8>> {
    check_features(x)?;
    let n = format::to_u32(x.nrows(), "n")?;
    let d = format::to_u32(x.ncols(), "D")?;
    let mut out = format::header(FEATURE_MAGIC, &[n, d], x.len() * 4);
    for v in x.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn save_features(path: impl AsRef<Path>, x: ArrayView2<'_, f64>) -> Result<()> {
    format::write_file(path.as_ref(), &encode_features(x)?)
}

/// Reads an `ADSQL001` label file.
pub fn load_labels(path: impl AsRef<Path>) -> Result<Array2<u8>> {
    let path = path.as_ref();
    decode_labels(&format::read_file(path)?).map_err(|e| e.context(path.display()))
}

pub fn decode_labels(buf: &[u8]) -> Result<Array2<u8>> {
    let mut r = Reader::new(buf, LABEL_MAGIC, "label file")?;
    let n = r.u32()?;
    let c = r.u32()?;
    let len = r.payload_len(n, c, 1)?;
    let payload = r.take(len)?.to_vec();
    r.finish()?;
    let l = Array2::from_shape_vec((n as usize, c as usize), payload)
        .map_err(|e| AdsqError::Format(e.to_string()))?;
    check_labels(l.view())?;
    Ok(l)
}

pub fn encode_labels(l: ArrayView2<'_, u8>) -> Result<Vec<u8>> {
    check_labels(l)?;
    let n = format::to_u32(l.nrows(), "n")?;
    let c = format::to_u32(l.ncols(), "c")?;
    let mut out = format::header(LABEL_MAGIC, &[n, c], l.len());
    out.extend(l.iter().copied());
    Ok(out)
}

pub fn save_labels(path: impl AsRef<Path>, l: ArrayView2<'_, u8>) -> Result<()> {
    format::write_file(path.as_ref(), &encode_labels(l)?)
}

/// Loads a feature file and a label file as one dataset.
pub fn load_dataset(features: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::new(load_features(features)?, load_labels(labels)?)
}

/// Pairwise similarity: `s_ij = 1` iff items `i` and `j` share a label.
///
/// Stored as the binary {0,1} view; the signed view is `2s - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    s: Array2<u8>,
}

impl SimilarityMatrix {
    /// Wraps an explicit binary matrix, checking symmetry, a unit diagonal
    /// and the {0,1} domain.
    pub fn from_binary(s: Array2<u8>) -> Result<Self> {
        let n = s.nrows();
        if s.ncols() != n {
            return Err(AdsqError::Shape(format!("similarity must be square, got {:?}", s.dim())));
        }
        for i in 0..n {
            if s[[i, i]] != 1 {
                return Err(AdsqError::Data(format!("similarity diagonal entry {i} is not 1")));
            }
            for j in 0..n {
                if s[[i, j]] > 1 {
                    return Err(AdsqError::Data(format!("similarity entry ({i}, {j}) not in {{0,1}}")));
                }
                if s[[i, j]] != s[[j, i]] {
                    return Err(AdsqError::Data(format!("similarity not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(SimilarityMatrix { s })
    }

    pub fn n(&self) -> usize {
        self.s.nrows()
    }

    pub fn binary(&self) -> ArrayView2<'_, u8> {
        self.s.view()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.s[[i, j]]
    }

    #[inline]
    pub fn signed_at(&self, i: usize, j: usize) -> f64 {
        2.0 * f64::from(self.s[[i, j]]) - 1.0
    }

    /// Signed {-1,+1} view, materialized.
    pub fn signed(&self) -> Array2<f64> {
        self.s.mapv(|v| 2.0 * f64::from(v) - 1.0)
    }

    /// Binary sub-matrix over `idx × idx`, as reals.
    pub fn binary_block(&self, idx: &[usize]) -> Array2<f64> {
        Array2::from_shape_fn((idx.len(), idx.len()), |(a, b)| f64::from(self.s[[idx[a], idx[b]]]))
    }
}

/// Builds `S` from a multi-hot label matrix.
///
/// Each row is reduced to a bitset so the pair test is a handful of word
/// ANDs regardless of the category count.
pub fn build_similarity(labels: ArrayView2<'_, u8>) -> SimilarityMatrix {
    let n = labels.nrows();
    let words = labels.ncols().div_ceil(64).max(1);
    let mut bits = vec![0u64; n * words];
    for (i, row) in labels.outer_iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v != 0 {
                bits[i * words + j / 64] |= 1 << (j % 64);
            }
        }
    }
    let mut s = Array2::<u8>::zeros((n, n));
    for i in 0..n {
        let bi = &bits[i * words..(i + 1) * words];
        for j in i..n {
            let bj = &bits[j * words..(j + 1) * words];
            let shared = bi.iter().zip(bj).any(|(a, b)| a & b != 0);
            let v = u8::from(shared || i == j);
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
    SimilarityMatrix { s }
}

/// Hyper-parameters and run configuration, deserialized from the JSON
/// config file. Missing keys take the defaults below; unknown keys are
/// rejected by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub nu: f64,
    pub eta: f64,
    /// Bits produced by each image network; final codes have `2 * k_half`.
    pub k_half: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Number of points in the geometric learning-rate grid.
    pub lr_steps: usize,
    pub t_label: usize,
    pub t_img: usize,
    pub outer_rounds: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Hidden widths of each image network (before the semantic layer).
    pub encoder_hidden: Vec<usize>,
    /// Hidden widths of the label network.
    pub label_hidden: Vec<usize>,
    pub semantic_dim: usize,
    pub variant: Variant,
    /// Use `||w - 1||_1` for the label-net quantization term instead of
    /// `|| |w| - 1 ||_1`.
    pub j3_literal: bool,
    /// Re-train the label network at the start of every outer round.
    pub refresh_labelnet: bool,
    /// Maximum coordinate-descent sweeps per B-step.
    pub bstep_sweeps: usize,
    pub converge_tol: f64,
    pub converge_patience: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1e-2,
            delta: 1.0,
            nu: 10.0,
            eta: 10.0,
            k_half: 6,
            lr_min: 1e-5,
            lr_max: 1e-2,
            lr_steps: 7,
            t_label: 10,
            t_img: 10,
            outer_rounds: 7,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            encoder_hidden: vec![4096, 4096],
            label_hidden: vec![4096],
            semantic_dim: 512,
            variant: Variant::Full,
            j3_literal: false,
            refresh_labelnet: true,
            bstep_sweeps: 3,
            converge_tol: 1e-4,
            converge_patience: 2,
        }
    }
}

impl HyperParams {
    pub fn from_json(text: &str) -> Result<Self> {
        let h: HyperParams = serde_json::from_str(text).map_err(|e| AdsqError::Config(e.to_string()))?;
        h.validate()?;
        Ok(h)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Lists every violated invariant.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("nu", self.nu),
            ("eta", self.eta),
            ("weight_decay", self.weight_decay),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                v.push(format!("{name} must be finite and >= 0, got {w}"));
            }
        }
        if self.k_half < 1 {
            v.push("k_half >= 1".to_string());
        }
        if self.batch_size < 2 {
            v.push(format!("batch_size >= 2, got {}", self.batch_size));
        }
        if self.semantic_dim < 1 {
            v.push("semantic_dim >= 1".to_string());
        }
        if self.encoder_hidden.contains(&0) || self.label_hidden.contains(&0) {
            v.push("hidden widths must be >= 1".to_string());
        }
        if !(self.lr_min.is_finite() && self.lr_min > 0.0) {
            v.push(format!("lr_min must be > 0, got {}", self.lr_min));
        }
        if !(self.lr_max.is_finite() && self.lr_max >= self.lr_min) {
            v.push(format!("lr_max must be >= lr_min, got {}", self.lr_max));
        }
        if self.lr_steps < 1 {
            v.push("lr_steps >= 1".to_string());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.converge_tol.is_finite() && self.converge_tol >= 0.0) {
            v.push("converge_tol must be finite and >= 0".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(AdsqError::Config(v.join("; ")))
        }
    }

    /// Geometric learning-rate grid from `lr_min` to `lr_max` with
    /// `lr_steps` points (1e-5..1e-2 in 7 points is a step of sqrt(10)).
    pub fn lr_grid(&self) -> Vec<f64> {
        if self.lr_steps <= 1 {
            return vec![self.lr_min];
        }
        let ratio = (self.lr_max / self.lr_min).ln() / (self.lr_steps - 1) as f64;
        (0..self.lr_steps)
            .map(|i| {
                if i + 1 == self.lr_steps {
                    self.lr_max
                } else {
                    self.lr_min * (ratio * i as f64).exp()
                }
            })
            .collect()
    }

    /// Learning rate for an outer round: one grid point per round, clamped
    /// at the last point.
    pub fn lr_for_round(&self, round: usize) -> f64 {
        let grid = self.lr_grid();
        grid[round.min(grid.len() - 1)]
    }
}

/// Shuffles `0..n` and splits it into batches of `batch_size`. A trailing
/// batch with fewer than two items has no pairs and is dropped.
pub fn minibatches<R: rand::Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(2))
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Checks dataset invariants against a configuration without stopping at
/// the first problem. An empty list means the pair is usable.
pub fn validate_dataset(d: &Dataset, h: &HyperParams) -> Vec<String> {
    let mut v = Vec::new();
    if d.n() < 2 {
        v.push(format!("n >= 2 (got n = {})", d.n()));
    }
    if d.n() < h.batch_size {
        v.push(format!("n >= batch_size (n = {}, batch_size = {})", d.n(), h.batch_size));
    }
    if d.features.iter().any(|x| !x.is_finite()) {
        v.push("all feature entries finite".to_string());
    }
    for (i, row) in d.labels.outer_iter().enumerate() {
        if row.iter().all(|&x| x == 0) {
            v.push(format!("label row {i} has >= 1 positive"));
        }
    }
    v.extend(h.violations());
    v
}
