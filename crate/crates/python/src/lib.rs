//! Python bindings. Build the cdylib and import it as `collection_forge`.

use std::path::PathBuf;

use collection_forge::coder::{self, Variant};
use collection_forge::datagen;
use collection_forge::dictionary;
use collection_forge::metric::{self, MetricModel, MetricOptions, MetricVariant, PairSets};
use collection_forge::pipeline::{self, PipelineConfig};
use collection_forge::recommend;
use collection_forge::Error;
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyArithmeticError, PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        3 => PyArithmeticError::new_err(e.to_string()),
        _ => match e {
            Error::MissingInput(_) | Error::Io(_) => PyFileNotFoundError::new_err(e.to_string()),
            _ => PyValueError::new_err(e.to_string()),
        },
    }
}

fn parse<T: std::str::FromStr>(name: &str, what: &str) -> PyResult<T> {
    name.parse().map_err(|_| PyValueError::new_err(format!("unknown {what} {name:?}")))
}

/// Round-trips a serializable value through JSON into Python objects.
fn json_value<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn model(a: Vec<Vec<f64>>) -> PyResult<MetricModel> {
    MetricModel::full(matrix(&a)?).map_err(to_py)
}

/// Soft threshold of `v` at `t`.
#[pyfunction]
pub fn prox_l1(v: Vec<f64>, t: f64) -> Vec<f64> {
    coder::prox_l1(&DVector::from_vec(v), t).iter().copied().collect()
}

/// Group soft threshold; `groups` are `(start, end)` index pairs.
#[pyfunction]
pub fn prox_group_l21(v: Vec<f64>, t: f64, groups: Vec<(usize, usize)>) -> PyResult<Vec<f64>> {
    let groups: Vec<_> = groups.into_iter().map(|(a, b)| a..b).collect();
    Ok(coder::prox_group_l21(&DVector::from_vec(v), t, &groups).map_err(to_py)?.iter().copied().collect())
}

/// Lasso code of `f` over the columns of `dictionary` (given as rows).
#[pyfunction]
pub fn sparse_code_lasso(f: Vec<f64>, dictionary: Vec<Vec<f64>>, lam: f64) -> PyResult<Vec<f64>> {
    let d = matrix(&dictionary)?;
    Ok(dictionary::sparse_code_lasso(&DVector::from_vec(f), &d, lam).map_err(to_py)?.iter().copied().collect())
}

#[pyfunction]
pub fn tokenize(text: &str) -> Vec<String> {
    datagen::tokenize(text)
}

#[pyfunction]
pub fn lccs(a: Vec<String>, b: Vec<String>) -> usize {
    datagen::lccs(&a, &b)
}

/// AP@K of a ranked relevance list.
#[pyfunction]
pub fn ap_at_k(relevance: Vec<bool>, k: usize) -> f64 {
    recommend::ap_at_k(&relevance, k)
}

#[pyfunction]
#[pyo3(signature = (candidates, relevant, k, trials=100_000, seed=0))]
pub fn random_baseline_map(candidates: usize, relevant: usize, k: usize, trials: usize, seed: u64) -> f64 {
    recommend::random_baseline_map(candidates, relevant, k, trials, seed)
}

#[pyfunction]
pub fn mahalanobis_distance(x: Vec<f64>, y: Vec<f64>, a: Vec<Vec<f64>>) -> PyResult<f64> {
    metric::mahalanobis_distance(&x, &y, &model(a)?).map_err(to_py)
}

/// Learns a metric from similar and dissimilar pairs; returns `A` as rows.
#[pyfunction]
#[pyo3(signature = (similar, dissimilar, variant="full", ridge=0.0))]
pub fn learn_metric(similar: Vec<(Vec<f64>, Vec<f64>)>, dissimilar: Vec<(Vec<f64>, Vec<f64>)>, variant: &str, ridge: f64) -> PyResult<Vec<Vec<f64>>> {
    let pair = |(x, y): (Vec<f64>, Vec<f64>)| (DVector::from_vec(x), DVector::from_vec(y));
    let pairs = PairSets { similar: similar.into_iter().map(pair).collect(), dissimilar: dissimilar.into_iter().map(pair).collect() };
    let variant: MetricVariant = parse(variant, "metric")?;
    let fit = metric::learn_metric(&pairs, variant, &MetricOptions { ridge, ..MetricOptions::default() }).map_err(to_py)?;
    Ok(rows(&fit.model.dense()))
}

/// Artifact-producing pipeline rooted at a work directory.
#[pyclass(module = "collection_forge")]
pub struct Pipeline {
    inner: pipeline::Pipeline,
}

#[pymethods]
impl Pipeline {
    /// `config` is a JSON string; omitted fields keep their defaults.
    #[new]
    #[pyo3(signature = (work_dir, seed=None, config=None))]
    pub fn new(work_dir: PathBuf, seed: Option<u64>, config: Option<&str>) -> PyResult<Self> {
        let cfg: PipelineConfig = match config {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => PipelineConfig::default(),
        };
        Ok(Pipeline { inner: pipeline::Pipeline::new(cfg, seed, Some(work_dir)).map_err(to_py)? })
    }

    #[getter]
    pub fn seed(&self) -> u64 {
        self.inner.stamp().seed
    }

    #[getter]
    pub fn config_hash(&self) -> String {
        self.inner.stamp().config_hash.clone()
    }

    pub fn synth<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_value(py, &self.inner.synth().map_err(to_py)?)
    }

    pub fn dict_learn<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_value(py, &self.inner.dict_learn().map_err(to_py)?)
    }

    #[pyo3(signature = (variant=None))]
    pub fn encode<'py>(&self, py: Python<'py>, variant: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
        let v = variant.map(|v| parse::<Variant>(v, "variant")).transpose()?;
        json_value(py, &self.inner.encode(v).map_err(to_py)?)
    }

    #[pyo3(signature = (variant=None, metric=None))]
    pub fn metric_train<'py>(&self, py: Python<'py>, variant: Option<&str>, metric: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
        let v = variant.map(|v| parse::<Variant>(v, "variant")).transpose()?;
        let m = metric.map(|m| parse::<MetricVariant>(m, "metric")).transpose()?;
        json_value(py, &self.inner.metric_train(v, m).map_err(to_py)?)
    }

    /// Writes the ranking CSV and returns its path.
    #[pyo3(signature = (variant=None, metric=None, k=None))]
    pub fn rank(&self, variant: Option<&str>, metric: Option<&str>, k: Option<usize>) -> PyResult<PathBuf> {
        let v = variant.map(|v| parse::<Variant>(v, "variant")).transpose()?;
        let m = metric.map(|m| parse::<MetricVariant>(m, "metric")).transpose()?;
        Ok(self.inner.rank(v, m, k).map_err(to_py)?.0)
    }

    #[pyo3(signature = (variant=None, metric=None, k=None))]
    pub fn eval<'py>(&self, py: Python<'py>, variant: Option<&str>, metric: Option<&str>, k: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
        let v = variant.map(|v| parse::<Variant>(v, "variant")).transpose()?;
        let m = metric.map(|m| parse::<MetricVariant>(m, "metric")).transpose()?;
        json_value(py, &self.inner.eval(v, m, k).map_err(to_py)?)
    }

    pub fn random_baseline<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_value(py, &self.inner.random_baseline().map_err(to_py)?)
    }
}

#[pymodule]
#[pyo3(name = "collection_forge")]
fn collection_forge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(prox_l1, m)?)?;
    m.add_function(wrap_pyfunction!(prox_group_l21, m)?)?;
    m.add_function(wrap_pyfunction!(sparse_code_lasso, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(lccs, m)?)?;
    m.add_function(wrap_pyfunction!(ap_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(random_baseline_map, m)?)?;
    m.add_function(wrap_pyfunction!(mahalanobis_distance, m)?)?;
    m.add_function(wrap_pyfunction!(learn_metric, m)?)?;
    m.add_class::<Pipeline>()?;
    m.add("VARIANTS", ["huber-l1", "huber-g", "avg-l1", "avg-g", "raw-avg"])?;
    m.add("METRICS", ["eucl", "diag", "full"])?;
    Ok(())
}
