//! Python bindings: training, encoding, bit-packed codes and retrieval
//! metrics. Matrices cross the boundary as lists of rows.

use adsq::codes::{encode, hamming_distance, pack, search_topk, unpack, PackedCodes};
use adsq::data::{build_similarity, Dataset, HyperParams};
use adsq::encoder::EncoderParams;
use adsq::metrics::{mean_ap, mean_precision_at_hamming2, pr_curve, precision_at_n, ApDenominator, RelevanceJudge};
use adsq::synth::{generate, SynthSpec};
use adsq::trainer::{load_hash_model, save_model_dir, train, training_log_csv, TrainState};
use adsq::AdsqError;
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: AdsqError) -> PyErr {
    match e {
        AdsqError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix<T: Copy>(rows: Vec<Vec<T>>, what: &str) -> PyResult<Array2<T>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err(format!("{what}: rows have different lengths")));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows<T: Copy>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn config(json: Option<&str>) -> PyResult<HyperParams> {
    match json {
        Some(text) => HyperParams::from_json(text).map_err(to_py),
        None => Ok(HyperParams::default()),
    }
}

/// Packed binary codes, one row per item.
#[pyclass(module = "adsq_py", frozen)]
struct Codes {
    inner: PackedCodes,
}

#[pymethods]
impl Codes {
    /// Packs a matrix of +1/-1 entries.
    #[staticmethod]
    fn from_signs(signs: Vec<Vec<i8>>) -> PyResult<Self> {
        let m = matrix(signs, "signs")?;
        Ok(Codes { inner: pack(m.view()).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Codes { inner: PackedCodes::load(path).map_err(to_py)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn to_signs(&self) -> Vec<Vec<i8>> {
        rows(&unpack(&self.inner))
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn k_total(&self) -> usize {
        self.inner.k_total()
    }

    /// Hamming distance between row `i` of these codes and row `j` of `other`.
    fn hamming(&self, i: usize, other: &Codes, j: usize) -> PyResult<u32> {
        if i >= self.inner.n() || j >= other.inner.n() {
            return Err(PyValueError::new_err("row index out of range"));
        }
        hamming_distance(self.inner.row(i), other.inner.row(j)).map_err(to_py)
    }

    /// Indices of the `k` database rows nearest to row `i`, ties by index.
    fn search(&self, i: usize, db: &Codes, k: usize) -> PyResult<Vec<usize>> {
        if i >= self.inner.n() {
            return Err(PyValueError::new_err("row index out of range"));
        }
        search_topk(self.inner.row(i), &db.inner, k).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    fn __repr__(&self) -> String {
        format!("Codes(n={}, k_total={})", self.inner.n(), self.inner.k_total())
    }
}

/// A trained pair of hashing networks.
#[pyclass(module = "adsq_py")]
struct Model {
    imgx: EncoderParams,
    imgy: EncoderParams,
    state: Option<(TrainState, HyperParams)>,
}

#[pymethods]
impl Model {
    /// Trains on feature rows and 0/1 label rows. `config` is a JSON object;
    /// missing keys take their defaults.
    #[staticmethod]
    #[pyo3(signature = (features, labels, config=None))]
    fn train(py: Python<'_>, features: Vec<Vec<f64>>, labels: Vec<Vec<u8>>, config: Option<&str>) -> PyResult<Self> {
        let h = self::config(config)?;
        let data = Dataset::new(matrix(features, "features")?, matrix(labels, "labels")?).map_err(to_py)?;
        let state = py
            .detach(|| {
                let s = build_similarity(data.labels());
                train(&data, &s, &h)
            })
            .map_err(to_py)?;
        Ok(Model { imgx: state.imgx.encoder.clone(), imgy: state.imgy.encoder.clone(), state: Some((state, h)) })
    }

    /// Loads the hashing networks from a model directory.
    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        let (imgx, imgy) = load_hash_model(dir).map_err(to_py)?;
        Ok(Model { imgx, imgy, state: None })
    }

    /// Writes the full model directory. Only available after training.
    fn save(&self, dir: &str) -> PyResult<()> {
        let (state, h) = self.state.as_ref().ok_or_else(|| PyValueError::new_err("only freshly trained models can be saved"))?;
        save_model_dir(dir, state, h).map_err(to_py)
    }

    fn encode(&self, features: Vec<Vec<f64>>) -> PyResult<Codes> {
        let x = matrix(features, "features")?;
        let signs = encode(x.view(), &self.imgx, &self.imgy).map_err(to_py)?;
        Ok(Codes { inner: pack(signs.view()).map_err(to_py)? })
    }

    #[getter]
    fn k_half(&self) -> usize {
        self.imgx.k_half()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.imgx.in_dim()
    }

    /// Training log CSV, or None for a loaded model.
    fn training_log(&self) -> Option<String> {
        self.state.as_ref().map(|(s, _)| training_log_csv(&s.history))
    }

    fn __repr__(&self) -> String {
        format!("Model(input_dim={}, k_half={})", self.imgx.in_dim(), self.imgx.k_half())
    }
}

/// Gaussian-cluster dataset: returns
/// `(train_features, train_labels, query_features, query_labels)`.
#[pyfunction]
#[pyo3(signature = (classes, dim, per_class, queries_per_class=25, spread=1.0, center_scale=1.0, overlap=0.0, seed=0))]
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn synth(
    classes: usize,
    dim: usize,
    per_class: usize,
    queries_per_class: usize,
    spread: f64,
    center_scale: f64,
    overlap: f64,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<u8>>, Vec<Vec<f64>>, Vec<Vec<u8>>)> {
    let spec = SynthSpec {
        classes,
        dim,
        per_class,
        queries_per_class,
        cluster_spread: spread,
        center_scale,
        multilabel_overlap: overlap,
        seed,
    };
    let d = generate(&spec).map_err(to_py)?;
    Ok((
        rows(&d.train.features().to_owned()),
        rows(&d.train.labels().to_owned()),
        rows(&d.query.features().to_owned()),
        rows(&d.query.labels().to_owned()),
    ))
}

/// The default configuration as a JSON string.
#[pyfunction]
fn default_config() -> String {
    HyperParams::default().to_json()
}

fn judge(query_labels: Vec<Vec<u8>>, db_labels: Vec<Vec<u8>>) -> PyResult<RelevanceJudge> {
    let q = matrix(query_labels, "query_labels")?;
    let d = matrix(db_labels, "db_labels")?;
    RelevanceJudge::new(q.view(), d.view()).map_err(to_py)
}

/// Mean average precision over the top `r` of each Hamming ranking.
#[pyfunction(name = "mean_ap")]
#[pyo3(signature = (query, db, query_labels, db_labels, r, total_relevant=false))]
fn py_mean_ap(query: &Codes, db: &Codes, query_labels: Vec<Vec<u8>>, db_labels: Vec<Vec<u8>>, r: usize, total_relevant: bool) -> PyResult<f64> {
    let denom = if total_relevant { ApDenominator::TotalRelevant } else { ApDenominator::MinCutoffTotal };
    mean_ap(&query.inner, &db.inner, &judge(query_labels, db_labels)?, r, denom).map_err(to_py)
}

/// Mean precision within Hamming radius 2.
#[pyfunction]
fn precision_at_hamming2(query: &Codes, db: &Codes, query_labels: Vec<Vec<u8>>, db_labels: Vec<Vec<u8>>) -> PyResult<f64> {
    mean_precision_at_hamming2(&query.inner, &db.inner, &judge(query_labels, db_labels)?).map_err(to_py)
}

/// `(recall, precision)` points.
#[pyfunction(name = "pr_curve")]
fn py_pr_curve(query: &Codes, db: &Codes, query_labels: Vec<Vec<u8>>, db_labels: Vec<Vec<u8>>, recall_grid: Vec<f64>) -> PyResult<Vec<(f64, f64)>> {
    pr_curve(&query.inner, &db.inner, &judge(query_labels, db_labels)?, &recall_grid).map_err(to_py)
}

/// `(N, precision)` points.
#[pyfunction(name = "precision_at_n")]
fn py_precision_at_n(query: &Codes, db: &Codes, query_labels: Vec<Vec<u8>>, db_labels: Vec<Vec<u8>>, ns: Vec<usize>) -> PyResult<Vec<(usize, f64)>> {
    precision_at_n(&query.inner, &db.inner, &judge(query_labels, db_labels)?, &ns).map_err(to_py)
}

#[pymodule]
fn adsq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Codes>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(py_mean_ap, m)?)?;
    m.add_function(wrap_pyfunction!(precision_at_hamming2, m)?)?;
    m.add_function(wrap_pyfunction!(py_pr_curve, m)?)?;
    m.add_function(wrap_pyfunction!(py_precision_at_n, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
