//! Python bindings. Arrays cross the boundary as nested lists of floats.

use std::collections::BTreeSet;

use hdafl_core::checkpoint::Checkpoint as CoreCheckpoint;
use hdafl_core::dataset::{self, Dataset as CoreDataset, SynthSpec};
use hdafl_core::eval::{self, EvalMode};
use hdafl_core::losses::{self, AalVariant, AttributePool, MiningDirection, PoolEntry};
use hdafl_core::model;
use hdafl_core::trainer::{self, TrainConfig as CoreTrainConfig};
use hdafl_core::Error;
use ndarray::{Array1, Array2, Array3};
use pyo3::exceptions::{PyArithmeticError, PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(err: Error) -> PyErr {
    let msg = err.to_string();
    match err {
        Error::MissingFile { .. } => PyFileNotFoundError::new_err(msg),
        Error::Numeric(_) => PyArithmeticError::new_err(msg),
        Error::Config(_) | Error::Validation { .. } | Error::Shape(_) | Error::Sampling(_) => {
            PyValueError::new_err(msg)
        }
        _ => PyRuntimeError::new_err(msg),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn py_to_json(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()
}

#[pyclass(frozen)]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        CoreDataset::load(path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(height, width, channels)`
    #[getter]
    fn grid(&self) -> (usize, usize, usize) {
        self.inner.grid()
    }

    #[getter]
    fn num_attributes(&self) -> usize {
        self.inner.num_attributes()
    }

    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn class_ids(&self) -> Vec<u32> {
        self.inner.class_ids().to_vec()
    }

    #[getter]
    fn seen_classes(&self) -> Vec<u32> {
        self.inner.seen_classes().iter().copied().collect()
    }

    #[getter]
    fn unseen_classes(&self) -> Vec<u32> {
        self.inner.unseen_classes().iter().copied().collect()
    }

    #[getter]
    fn train_indices(&self) -> Vec<usize> {
        self.inner.train_indices().to_vec()
    }

    #[getter]
    fn test_indices(&self) -> Vec<usize> {
        self.inner.test_indices().to_vec()
    }

    #[getter]
    fn class_semantics(&self) -> Vec<Vec<f64>> {
        rows(self.inner.class_semantics())
    }

    #[getter]
    fn attribute_semantics(&self) -> Vec<Vec<f64>> {
        rows(self.inner.attribute_semantics())
    }

    /// Image `i` as an `H × W × C` nested list.
    fn feature_map(&self, i: usize) -> PyResult<Vec<Vec<Vec<f64>>>> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("image index {i} out of range")));
        }
        let f = self.inner.feature_map(i);
        Ok(f.outer_iter().map(|plane| rows(&plane.to_owned())).collect())
    }
}

#[pyfunction]
#[pyo3(signature = (n_seen=10, n_unseen=3, num_attributes=12, channels=64, height=7, width=7, images_per_class=20, noise_scale=0.1, seed=1))]
#[allow(clippy::too_many_arguments)]
fn generate_synthetic(
    n_seen: usize,
    n_unseen: usize,
    num_attributes: usize,
    channels: usize,
    height: usize,
    width: usize,
    images_per_class: usize,
    noise_scale: f64,
    seed: u64,
) -> PyResult<Dataset> {
    let spec = SynthSpec {
        n_seen,
        n_unseen,
        num_attributes,
        channels,
        height,
        width,
        images_per_class,
        noise_scale,
        seed,
    };
    dataset::generate_synthetic(&spec)
        .map(|inner| Dataset { inner })
        .map_err(to_py)
}

/// Training configuration. Keyword arguments follow the field names of the
/// TOML `[train]` schema; nested `episode`, `loss` dicts are accepted.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct TrainConfig {
    inner: CoreTrainConfig,
}

#[pymethods]
impl TrainConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let inner = match kwargs {
            Some(kw) => serde_json::from_str(&py_to_json(kw.as_any())?).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => CoreTrainConfig::default(),
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &serde_json::to_string(&self.inner).expect("serialize config"))
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({})", serde_json::to_string(&self.inner).expect("serialize config"))
    }
}

#[pyclass(frozen)]
struct Checkpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        CoreCheckpoint::load(path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn epochs_completed(&self) -> usize {
        self.inner.progress.epochs_completed
    }

    #[getter]
    fn episodes_completed(&self) -> usize {
        self.inner.progress.episodes_completed
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.num_parameters()
    }

    /// Head outputs for one `H × W × C` feature map.
    fn forward<'py>(&self, py: Python<'py>, feature_map: Vec<Vec<Vec<f64>>>) -> PyResult<Bound<'py, PyDict>> {
        let h = feature_map.len();
        let w = feature_map.first().map_or(0, Vec::len);
        let c = feature_map.first().and_then(|r| r.first()).map_or(0, Vec::len);
        if feature_map.iter().any(|r| r.len() != w || r.iter().any(|v| v.len() != c)) {
            return Err(PyValueError::new_err("feature map must be a rectangular H x W x C list"));
        }
        let flat: Vec<f64> = feature_map.into_iter().flatten().flatten().collect();
        let f = Array3::from_shape_vec((h, w, c), flat).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let out = model::forward(&f, &self.inner.params, self.inner.model.attention_softmax_axis).map_err(to_py)?;
        let d = PyDict::new(py);
        let att: Vec<Vec<Vec<f64>>> = out.att.outer_iter().map(|p| rows(&p.to_owned())).collect();
        d.set_item("att", att)?;
        d.set_item("af", rows(&out.af))?;
        d.set_item("eaf", rows(&out.eaf))?;
        d.set_item("h_x", out.h_x.to_vec())?;
        d.set_item("a_hat", out.a_hat.to_vec())?;
        Ok(d)
    }
}

/// Returns `(checkpoint, loss_trace)` where each trace row is a dict.
#[pyfunction]
#[pyo3(signature = (dataset, config=None))]
fn train<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    config: Option<TrainConfig>,
) -> PyResult<(Checkpoint, Bound<'py, PyAny>)> {
    let cfg = config.map_or_else(CoreTrainConfig::default, |c| c.inner);
    let outcome = py
        .detach(|| trainer::train(&dataset.inner, &cfg))
        .map_err(to_py)?;
    let trace = json_to_py(py, &serde_json::to_string(&outcome.trace).expect("serialize trace"))?;
    Ok((Checkpoint { inner: outcome.checkpoint }, trace))
}

/// Evaluation report as a dict.
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, mode="gzsl", gamma=eval::GAMMA_DEFAULT))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    mode: &str,
    gamma: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let mode: EvalMode = mode.parse().map_err(to_py)?;
    let report = eval::evaluate(&checkpoint.inner, &dataset.inner, mode, gamma).map_err(to_py)?;
    json_to_py(py, &serde_json::to_string(&report).expect("serialize report"))
}

#[pyfunction]
fn harmonic_mean(s: f64, u: f64) -> f64 {
    eval::harmonic_mean(s, u)
}

#[pyfunction]
fn per_class_accuracy(predictions: Vec<u32>, labels: Vec<u32>, classes: Vec<u32>) -> PyResult<f64> {
    if predictions.len() != labels.len() {
        return Err(PyValueError::new_err("predictions and labels differ in length"));
    }
    let classes: BTreeSet<u32> = classes.into_iter().collect();
    Ok(eval::per_class_accuracy(&predictions, &labels, &classes))
}

#[pyfunction]
fn czsl_predict(h: Vec<f64>, prototypes: Vec<Vec<f64>>, class_ids: Vec<u32>, alpha: f64) -> PyResult<u32> {
    let cp = matrix(prototypes)?;
    if class_ids.is_empty() || cp.nrows() != class_ids.len() || cp.ncols() != h.len() {
        return Err(PyValueError::new_err("prototype rows must match class ids and feature width"));
    }
    Ok(eval::czsl_predict(Array1::from(h).view(), &cp, &class_ids, alpha))
}

#[pyfunction]
fn gzsl_predict(
    h: Vec<f64>,
    prototypes: Vec<Vec<f64>>,
    class_ids: Vec<u32>,
    alpha: f64,
    gamma: f64,
    seen_mask: Vec<bool>,
) -> PyResult<u32> {
    let cp = matrix(prototypes)?;
    if class_ids.is_empty()
        || cp.nrows() != class_ids.len()
        || seen_mask.len() != class_ids.len()
        || cp.ncols() != h.len()
    {
        return Err(PyValueError::new_err("prototype rows, class ids and seen mask must align"));
    }
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(PyValueError::new_err("gamma must be finite and non-negative"));
    }
    Ok(eval::gzsl_predict(Array1::from(h).view(), &cp, &class_ids, alpha, gamma, &seen_mask))
}

#[pyfunction]
fn classification_loss(h: Vec<Vec<f64>>, prototypes: Vec<Vec<f64>>, labels: Vec<usize>, alpha: f64) -> PyResult<f64> {
    losses::classification_loss(&matrix(h)?, &matrix(prototypes)?, &labels, alpha).map_err(to_py)
}

#[pyfunction]
fn mse_attribute_loss(scores: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    losses::mse_attribute_loss(&Array1::from(scores), &Array1::from(target)).map_err(to_py)
}

#[pyfunction]
fn class_contrastive_loss(h: Vec<Vec<f64>>, labels: Vec<usize>, tau: f64) -> PyResult<f64> {
    losses::class_contrastive_loss(&matrix(h)?, &labels, tau).map_err(to_py)
}

fn pool(features: Vec<Vec<f64>>, attribute_ids: Vec<usize>, image_ids: Vec<usize>) -> PyResult<AttributePool> {
    if features.len() != attribute_ids.len() || features.len() != image_ids.len() {
        return Err(PyValueError::new_err("features, attribute_ids and image_ids differ in length"));
    }
    let m = matrix(features)?;
    let entries = m
        .rows()
        .into_iter()
        .zip(attribute_ids.into_iter().zip(image_ids))
        .map(|(r, (a, i))| PoolEntry {
            feature: r.to_owned(),
            attribute_id: a,
            image_id: i,
        })
        .collect();
    Ok(AttributePool { entries })
}

#[pyfunction]
#[pyo3(signature = (features, attribute_ids, prototypes, variant="verbatim", margin=0.0))]
fn attribute_alignment_loss(
    features: Vec<Vec<f64>>,
    attribute_ids: Vec<usize>,
    prototypes: Vec<Vec<f64>>,
    variant: &str,
    margin: f64,
) -> PyResult<f64> {
    let variant = match variant {
        "verbatim" => AalVariant::Verbatim,
        "flipped" => AalVariant::Flipped,
        other => return Err(PyValueError::new_err(format!("unknown variant `{other}`"))),
    };
    let n = attribute_ids.len();
    let p = pool(features, attribute_ids, vec![0; n])?;
    losses::attribute_alignment_loss(&p, &matrix(prototypes)?, variant, margin).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (features, attribute_ids, image_ids, mu=0.32, epsilon=0.42, tau=0.3))]
fn attribute_contrastive_loss(
    features: Vec<Vec<f64>>,
    attribute_ids: Vec<usize>,
    image_ids: Vec<usize>,
    mu: f64,
    epsilon: f64,
    tau: f64,
) -> PyResult<f64> {
    let p = pool(features, attribute_ids, image_ids)?;
    losses::attribute_contrastive_loss(&p, mu, epsilon, tau).map_err(to_py)
}

/// Indices of the candidates kept after dropping the easiest `fraction`.
/// `positives=True` drops the most similar, otherwise the least similar.
#[pyfunction]
fn mine_hard_samples(anchor: Vec<f64>, candidates: Vec<Vec<f64>>, fraction: f64, positives: bool) -> PyResult<Vec<usize>> {
    let direction = if positives {
        MiningDirection::DropMostSimilar
    } else {
        MiningDirection::DropLeastSimilar
    };
    let cands: Vec<Array1<f64>> = candidates.into_iter().map(Array1::from).collect();
    if cands.iter().any(|c| c.len() != anchor.len()) {
        return Err(PyValueError::new_err("candidate widths must match the anchor"));
    }
    losses::mine_hard_samples(&anchor, &cands, fraction, direction).map_err(to_py)
}

#[pymodule]
pub fn hdafl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<TrainConfig>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(harmonic_mean, m)?)?;
    m.add_function(wrap_pyfunction!(per_class_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(czsl_predict, m)?)?;
    m.add_function(wrap_pyfunction!(gzsl_predict, m)?)?;
    m.add_function(wrap_pyfunction!(classification_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mse_attribute_loss, m)?)?;
    m.add_function(wrap_pyfunction!(class_contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(attribute_alignment_loss, m)?)?;
    m.add_function(wrap_pyfunction!(attribute_contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mine_hard_samples, m)?)?;
    Ok(())
}
