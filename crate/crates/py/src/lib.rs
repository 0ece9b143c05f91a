//! Python bindings: datasets, the substitution model, the evaluation
//! protocol and the config-driven pipeline.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use privsub_core::autodiff::Tensor;
use privsub_core::config::ExperimentConfig;
use privsub_core::data;
use privsub_core::error::CoreError;
use privsub_core::eval;
use privsub_core::infer::{self, Obfuscator};
use privsub_core::infotheory::{self, EnumerableInstance, StochasticKernel};
use privsub_core::model::{ModelConfig, SubstitutionModel};
use privsub_core::runner;
use privsub_core::train::{self, TrainConfig};

fn err(e: CoreError) -> PyErr {
    match e {
        CoreError::Validation(_) | CoreError::Schema(_) | CoreError::Row { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse_role(role: &str) -> PyResult<data::Role> {
    match role {
        "private" => Ok(data::Role::Private),
        "useful" => Ok(data::Role::Useful),
        "hidden" => Ok(data::Role::Hidden),
        other => Err(PyValueError::new_err(format!(
            "role must be private/useful/hidden, got '{other}'"
        ))),
    }
}

fn rows_to_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(err)
}

fn tensor_to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Feature matrix with role-tagged categorical labels.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Synthetic dataset: `attributes` is a list of
    /// `(name, cardinality, role)`; optional `correlations` is a list of
    /// `(a, b, rho)` pairwise label-correlation targets; `marginals` maps an
    /// attribute name to its class distribution.
    #[staticmethod]
    #[pyo3(signature = (n_samples, attributes, noise_sigma=0.0, seed=0, correlations=vec![], marginals=None))]
    fn synthetic(
        n_samples: usize,
        attributes: Vec<(String, usize, String)>,
        noise_sigma: f64,
        seed: u64,
        correlations: Vec<(String, String, f64)>,
        marginals: Option<BTreeMap<String, Vec<f64>>>,
    ) -> PyResult<Self> {
        let attrs: Vec<(&str, usize, data::Role)> = attributes
            .iter()
            .map(|(name, card, role)| Ok((name.as_str(), *card, parse_role(role)?)))
            .collect::<PyResult<_>>()?;
        let mut spec = data::SyntheticSpec::uniform(n_samples, &attrs, noise_sigma, seed);
        for (a, b, rho) in &correlations {
            spec = spec.with_correlation(a, b, *rho);
        }
        if let Some(marginals) = marginals {
            for (name, marginal) in marginals {
                spec = spec.with_marginal(&name, marginal);
            }
        }
        Ok(PyDataset { inner: data::generate_synthetic(&spec).map_err(err)? })
    }

    /// Loads a CSV with `f_<i>` feature columns and one label column per
    /// schema entry `(name, cardinality, role)`.
    #[staticmethod]
    fn from_csv(path: PathBuf, schema: Vec<(String, usize, String)>) -> PyResult<Self> {
        let schema: Vec<data::AttributeSchema> = schema
            .iter()
            .map(|(name, card, role)| {
                Ok(data::AttributeSchema {
                    name: name.clone(),
                    cardinality: *card,
                    role: parse_role(role)?,
                })
            })
            .collect::<PyResult<_>>()?;
        Ok(PyDataset { inner: data::load_csv(path, &schema).map_err(err)? })
    }

    fn to_csv(&self, path: PathBuf) -> PyResult<()> {
        data::save_csv(&self.inner, path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn features(&self) -> Vec<Vec<f64>> {
        tensor_to_rows(self.inner.features())
    }

    fn labels(&self, attribute: &str) -> PyResult<Vec<usize>> {
        Ok(self.inner.labels(attribute).map_err(err)?.to_vec())
    }

    fn schema(&self) -> Vec<(String, usize, String)> {
        self.inner
            .schema()
            .iter()
            .map(|a| {
                let role = match a.role {
                    data::Role::Private => "private",
                    data::Role::Useful => "useful",
                    data::Role::Hidden => "hidden",
                };
                (a.name.clone(), a.cardinality, role.to_string())
            })
            .collect()
    }

    /// Seeded train/test split, standardized on the training statistics.
    fn split(&self, train_fraction: f64, seed: u64) -> PyResult<(PyDataset, PyDataset)> {
        let (train, test) =
            data::split_dataset(&self.inner, train_fraction, seed).map_err(err)?;
        let (train, test) = data::standardize_splits(train, test).map_err(err)?;
        Ok((PyDataset { inner: train }, PyDataset { inner: test }))
    }
}

/// The trained substitution mechanism.
#[pyclass(name = "Model")]
struct PyModel {
    inner: SubstitutionModel,
}

#[pymethods]
impl PyModel {
    /// Trains a model on `train`: draws a substitute pool of `pool_size`
    /// rows and optimizes the substitution probabilities. `lambda_weight`
    /// defaults to N/M and `mu_weight` to 0.2·N, from the dataset roles.
    #[staticmethod]
    #[pyo3(signature = (train, pool_size, tau=0.1, hidden_layers=vec![64], embed_dim=32,
                        epochs=100, batch_size=256, learning_rate=1e-3, weight_decay=1e-4,
                        lambda_weight=None, mu_weight=None, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        train: &PyDataset,
        pool_size: usize,
        tau: f64,
        hidden_layers: Vec<usize>,
        embed_dim: usize,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        weight_decay: f64,
        lambda_weight: Option<f64>,
        mu_weight: Option<f64>,
        seed: u64,
    ) -> PyResult<Self> {
        let ds = &train.inner;
        let n_private = ds.names_with_role(data::Role::Private).len().max(1);
        let n_useful = ds.names_with_role(data::Role::Useful).len();
        let substitute = data::sample_substitute(ds, pool_size, seed).map_err(err)?;
        let model = SubstitutionModel::init(
            ModelConfig { hidden_layers, embed_dim, tau, ..Default::default() },
            ds.dim(),
            substitute,
            ds.standardization().cloned(),
            seed,
        )
        .map_err(err)?;
        let config = TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            weight_decay,
            lambda: lambda_weight.unwrap_or(n_useful as f64 / n_private as f64),
            mu: mu_weight.unwrap_or(0.2 * n_useful as f64),
            seed,
            log_every: 1_000_000,
        };
        let (model, _) = train::train(model, ds, &config).map_err(err)?;
        Ok(PyModel { inner: model })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, _) = SubstitutionModel::load(path).map_err(err)?;
        Ok(PyModel { inner: model })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path, "python").map_err(err)
    }

    #[getter]
    fn pool_size(&self) -> usize {
        self.inner.pool_size()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau()
    }

    /// Row-stochastic substitution probabilities for raw feature rows.
    fn substitution_probs(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = rows_to_tensor(rows)?;
        let probs = self.inner.substitution_probs(&x).map_err(err)?;
        Ok((0..probs.batch()).map(|i| probs.row(i).to_vec()).collect())
    }

    /// `repeats` seeded substitution draws per dataset row; returns
    /// `(original_index, pool_slot, repeat)` triples.
    fn substitute(
        &self,
        dataset: &PyDataset,
        repeats: usize,
        seed: u64,
    ) -> PyResult<Vec<(usize, usize, usize)>> {
        let records = infer::substitute_batch(&self.inner, &dataset.inner, repeats, seed, false)
            .map_err(err)?;
        Ok(records
            .into_iter()
            .map(|r| (r.original_index, r.substitute_index, r.repeat))
            .collect())
    }

    /// Released feature rows (one substitution draw per input row).
    fn release(&self, rows: Vec<Vec<f64>>, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let x = rows_to_tensor(rows)?;
        Ok(tensor_to_rows(&self.inner.release(&x, seed).map_err(err)?))
    }
}

/// Runs the probing-attack protocol against a trained model and returns the
/// per-attribute metrics plus mNAG as a dict.
#[pyfunction]
#[pyo3(signature = (model, train, test, repeats=4, data_fraction=1.0, probe_epochs=30, seed=0))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    model: &PyModel,
    train: &PyDataset,
    test: &PyDataset,
    repeats: usize,
    data_fraction: f64,
    probe_epochs: usize,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let budget = eval::AttackBudget { data_fraction, repeats, seed };
    let probe = eval::ProbeConfig { epochs: probe_epochs, ..Default::default() };
    let report = eval::evaluate(&model.inner, &train.inner, &test.inner, &budget, &probe, "py")
        .map_err(err)?;
    json_to_py(py, &serde_json::to_value(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?)
}

/// Exact diagnostics of a model on an enumerable dataset: the Monte-Carlo
/// objective bound, the entanglement ceilings and the mechanism-closeness
/// check, as a list of dicts.
#[pyfunction]
#[pyo3(signature = (model, train, lambda_weight=1.0, mu_weight=0.2, seed=0))]
fn diagnostics(
    py: Python<'_>,
    model: &PyModel,
    train: &PyDataset,
    lambda_weight: f64,
    mu_weight: f64,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let instance =
        EnumerableInstance::from_dataset(&train.inner, infotheory::MAX_STATES).map_err(err)?;
    let kernel = StochasticKernel::from_model(&instance, &model.inner).map_err(err)?;
    let mut reports = Vec::new();
    reports.push(
        infotheory::check_objective_bound(
            &instance,
            &kernel,
            lambda_weight,
            mu_weight,
            1000,
            16.min(instance.n_rows()),
            seed,
            "objective_bound",
        )
        .map_err(err)?,
    );
    reports.extend(infotheory::check_entanglement_ceilings(&instance, &kernel, 3).map_err(err)?);
    for attr in train.inner.schema() {
        if attr.role == data::Role::Private && attr.cardinality <= 8 {
            reports.push(infotheory::ldp_bound(&instance, &kernel, &attr.name).map_err(err)?.report);
        }
    }
    json_to_py(py, &serde_json::to_value(&reports).map_err(|e| PyRuntimeError::new_err(e.to_string()))?)
}

/// Executes a config file end to end, exactly like the command-line `run`.
#[pyfunction]
#[pyo3(signature = (config_path, out_dir=None, seed=None, force=false))]
fn run_experiment(
    py: Python<'_>,
    config_path: PathBuf,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
    force: bool,
) -> PyResult<Py<PyAny>> {
    let mut config = ExperimentConfig::from_path(&config_path).map_err(err)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let out = out_dir.unwrap_or_else(|| PathBuf::from(&config.output.dir));
    let summary = runner::run(&config, &out, force).map_err(err)?;
    json_to_py(py, &serde_json::to_value(&summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))?)
}

fn json_to_py(py: Python<'_>, value: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use pyo3::types::{PyDict, PyList};
    use pyo3::IntoPyObjectExt;
    match value {
        serde_json::Value::Null => Ok(py.None()),
        serde_json::Value::Bool(b) => b.into_py_any(py),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_py_any(py)
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_py_any(py)
            }
        }
        serde_json::Value::String(s) => s.as_str().into_py_any(py),
        serde_json::Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_py_any(py)
        }
        serde_json::Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, v) in map {
                dict.set_item(k, json_to_py(py, v)?)?;
            }
            dict.into_py_any(py)
        }
    }
}

#[pymodule]
fn privsub(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(diagnostics, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
