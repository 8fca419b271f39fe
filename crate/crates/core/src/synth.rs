//! Seeded Gaussian-cluster datasets.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::{AdsqError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    /// Training items per class.
    pub per_class: usize,
    pub queries_per_class: usize,
    /// Standard deviation of each item around its class center.
    pub cluster_spread: f64,
    /// Centers are uniform in `[-center_scale, center_scale]^dim`.
    pub center_scale: f64,
    /// Probability that an item gets one extra random label.
    pub multilabel_overlap: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            dim: 32,
            per_class: 100,
            queries_per_class: 25,
            cluster_spread: 1.0,
            center_scale: 1.0,
            multilabel_overlap: 0.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.classes < 2 {
            v.push(format!("classes >= 2, got {}", self.classes));
        }
        if self.dim < 1 {
            v.push("dim >= 1".to_string());
        }
        if !(self.cluster_spread.is_finite() && self.cluster_spread > 0.0) {
            v.push(format!("spread must be > 0, got {}", self.cluster_spread));
        }
        if !(self.center_scale.is_finite() && self.center_scale >= 0.0) {
            v.push(format!("center_scale must be >= 0, got {}", self.center_scale));
        }
        if !(0.0..=1.0).contains(&self.multilabel_overlap) {
            v.push(format!("overlap must be a probability, got {}", self.multilabel_overlap));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(AdsqError::Config(v.join("; ")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: Dataset,
    pub query: Dataset,
    pub centers: Array2<f64>,
}

/// Draws centers, then the training split, then the query split, all from
/// one ChaCha8 stream. Items are grouped by primary class. Features are
/// rounded to f32 so they survive the on-disk format unchanged.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.center_scale;
    let centers = if c > 0.0 {
        let unif = Uniform::new_inclusive(-c, c).map_err(|e| AdsqError::Config(e.to_string()))?;
        Array2::from_shape_simple_fn((spec.classes, spec.dim), || unif.sample(&mut rng))
    } else {
        Array2::zeros((spec.classes, spec.dim))
    };
    let noise = Normal::new(0.0, spec.cluster_spread).map_err(|e| AdsqError::Config(e.to_string()))?;
    let mut split = |per_class: usize| -> Result<Dataset> {
        let n = per_class * spec.classes;
        let mut x = Array2::zeros((n, spec.dim));
        let mut l = Array2::zeros((n, spec.classes));
        for i in 0..n {
            let class = i / per_class.max(1);
            for d in 0..spec.dim {
                x[[i, d]] = (centers[[class, d]] + noise.sample(&mut rng)) as f32 as f64;
            }
            l[[i, class]] = 1u8;
            if spec.multilabel_overlap > 0.0 && rng.random::<f64>() < spec.multilabel_overlap {
                let other = (class + rng.random_range(1..spec.classes)) % spec.classes;
                l[[i, other]] = 1;
            }
        }
        Dataset::new(x, l)
    };
    let train = split(spec.per_class)?;
    let query = split(spec.queries_per_class)?;
    Ok(SynthData { train, query, centers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_similarity;

    fn small() -> SynthSpec {
        SynthSpec { classes: 3, dim: 5, per_class: 6, queries_per_class: 2, ..SynthSpec::default() }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.train.features(), b.train.features());
        assert_eq!(a.query.labels(), b.query.labels());
        let c = generate(&SynthSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a.train.features(), c.train.features());
    }

    #[test]
    fn tiny_spread_is_nearest_center_separable() {
        let spec = SynthSpec { cluster_spread: 1e-6, ..small() };
        let d = generate(&spec).unwrap();
        for (i, row) in d.train.features().outer_iter().enumerate() {
            let nearest = (0..spec.classes)
                .min_by(|&a, &b| {
                    let da = (&row - &d.centers.row(a)).mapv(|v| v * v).sum();
                    let db = (&row - &d.centers.row(b)).mapv(|v| v * v).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(d.train.labels()[[i, nearest]], 1);
        }
    }

    #[test]
    fn single_label_gives_block_diagonal_similarity() {
        let d = generate(&small()).unwrap();
        let s = build_similarity(d.train.labels());
        for i in 0..d.train.n() {
            assert_eq!(d.train.labels().row(i).iter().filter(|&&v| v == 1).count(), 1);
            for j in 0..d.train.n() {
                assert_eq!(s.get(i, j), u8::from(i / 6 == j / 6));
            }
        }
    }

    #[test]
    fn overlap_adds_labels() {
        let d = generate(&SynthSpec { multilabel_overlap: 1.0, ..small() }).unwrap();
        assert!(d.train.labels().outer_iter().all(|r| r.iter().filter(|&&v| v == 1).count() == 2));
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(generate(&SynthSpec { classes: 1, ..small() }).is_err());
        assert!(generate(&SynthSpec { cluster_spread: 0.0, ..small() }).is_err());
    }
}
