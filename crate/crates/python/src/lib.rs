use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use outfit_compat::catalog::{load_catalog, load_pairs, SplitFractions};
use outfit_compat::dataset::Dataset;
use outfit_compat::eval::{evaluate_auc, mrr_retrieval, per_rule_eval, PairScorer, QuerySplit, StudentScorer, TeacherScorer};
use outfit_compat::rules::{parse_rules, RuleSet};
use outfit_compat::synth::{gen_synthetic, SynthConfig};
use outfit_compat::trainer::{
    load_checkpoint, resume, save_checkpoint, train_with_observer, Checkpoint, Selection, TrainConfig, TrainMode,
};
use outfit_compat::Error;

create_exception!(outfit_compat_py, OutfitError, PyException);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::RejectedInput(_) => PyValueError::new_err(e.to_string()),
        _ => OutfitError::new_err(format!("[{}] {e}", e.category())),
    }
}

/// Catalog, rules and the seeded train/valid/test split.
#[pyclass(name = "Dataset", module = "outfit_compat_py", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (items, pairs, rules=None, seed=0))]
    fn load(items: PathBuf, pairs: PathBuf, rules: Option<PathBuf>, seed: u64) -> PyResult<Self> {
        let catalog = load_catalog(&items).map_err(py_err)?;
        let pairs = load_pairs(&pairs, &catalog).map_err(py_err)?;
        let rules = match rules {
            Some(p) => parse_rules(p).map_err(py_err)?,
            None => RuleSet::default(),
        };
        let inner = Dataset::split(catalog, &pairs, rules, SplitFractions::default(), seed).map_err(py_err)?;
        Ok(PyDataset { inner })
    }

    /// Synthetic data with planted rules, split with the same seed.
    #[staticmethod]
    #[pyo3(signature = (seed=0, n_tops=None, n_bottoms=None, n_pairs=None, out_dir=None))]
    fn synthetic(
        seed: u64,
        n_tops: Option<usize>,
        n_bottoms: Option<usize>,
        n_pairs: Option<usize>,
        out_dir: Option<PathBuf>,
    ) -> PyResult<Self> {
        let d = SynthConfig::default();
        let cfg = SynthConfig {
            seed,
            n_tops: n_tops.unwrap_or(d.n_tops),
            n_bottoms: n_bottoms.unwrap_or(d.n_bottoms),
            n_pairs: n_pairs.unwrap_or(d.n_pairs),
            ..d
        };
        let data = gen_synthetic(&cfg).map_err(py_err)?;
        if let Some(dir) = out_dir {
            data.write(dir).map_err(py_err)?;
        }
        let inner =
            Dataset::split(data.catalog, &data.pairs, data.rules, SplitFractions::default(), seed).map_err(py_err)?;
        Ok(PyDataset { inner })
    }

    /// `(train, valid, test)` pair counts.
    #[getter]
    fn sizes(&self) -> (usize, usize, usize) {
        let s = self.inner.sizes();
        (s.train, s.valid, s.test)
    }

    #[getter]
    fn rules(&self) -> Vec<String> {
        self.inner.rules.rules().iter().map(|r| r.to_string()).collect()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        let s = self.inner.sizes();
        format!(
            "Dataset(tops={}, bottoms={}, train={}, valid={}, test={}, rules={})",
            self.inner.catalog.num_tops(),
            self.inner.catalog.num_bottoms(),
            s.train,
            s.valid,
            s.test,
            self.inner.rules.len()
        )
    }
}

/// A trained model, i.e. the contents of a checkpoint.
#[pyclass(name = "Model", module = "outfit_compat_py", frozen)]
struct PyModel {
    inner: Checkpoint,
}

enum Built<'a> {
    Student(StudentScorer),
    Teacher(TeacherScorer<'a>),
}

impl PyModel {
    fn scorer<'a>(&'a self, ds: &'a Dataset, mode: &str) -> PyResult<Built<'a>> {
        let student = StudentScorer::new(&self.inner.student, &ds.catalog).map_err(py_err)?;
        match mode {
            "p" => Ok(Built::Student(student)),
            "q" if ds.rules.is_empty() => Err(PyValueError::new_err("q mode needs a dataset with rules")),
            "q" => TeacherScorer::new(&self.inner.student, &self.inner.attention, &ds.rules, &ds.catalog, self.inner.config.c)
                .map(Built::Teacher)
                .map_err(py_err),
            other => Err(PyValueError::new_err(format!("mode must be 'p' or 'q', got {other:?}"))),
        }
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: load_checkpoint(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    /// One dict per epoch: epoch, train_loss, train_auc, valid_auc, rho.
    #[getter]
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .history
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("epoch", r.epoch)?;
                d.set_item("train_loss", r.train_loss)?;
                d.set_item("train_auc", r.train_auc)?;
                d.set_item("valid_auc", r.valid_auc)?;
                d.set_item("rho", r.rho)?;
                Ok(d)
            })
            .collect()
    }

    /// Student compatibility score of one (top id, bottom id) pair.
    fn score(&self, dataset: &PyDataset, top: &str, bottom: &str) -> PyResult<f64> {
        let ds = &dataset.inner;
        let (Some(i), Some(j)) = (ds.catalog.top_index(top), ds.catalog.bottom_index(bottom)) else {
            return Err(PyValueError::new_err(format!("unknown item pair ({top}, {bottom})")));
        };
        Ok(StudentScorer::new(&self.inner.student, &ds.catalog).map_err(py_err)?.score(i, j))
    }

    /// Triplet AUC on the test split, with per-rule AUC when rules exist.
    #[pyo3(signature = (dataset, mode="p", negatives=3))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, mode: &str, negatives: usize) -> PyResult<Bound<'py, PyDict>> {
        let ds = &dataset.inner;
        let triplets = ds.test_triplets(negatives).map_err(py_err)?;
        let built = self.scorer(ds, mode)?;
        let (report, per_rule) = match &built {
            Built::Student(s) => (evaluate_auc(s, &triplets), per_rule(s, ds, &triplets)),
            Built::Teacher(s) => (evaluate_auc(s, &triplets), per_rule(s, ds, &triplets)),
        };
        let report = report.map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("auc", report.auc)?;
        d.set_item("n_triplets", report.n_triplets)?;
        d.set_item("per_rule", per_rule.map_err(py_err)?)?;
        Ok(d)
    }

    /// Mean reciprocal rank of each test top's held-out bottom among
    /// `t_candidates` candidates.
    #[pyo3(signature = (dataset, mode="p", split="all", t_candidates=10))]
    fn retrieve<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        mode: &str,
        split: &str,
        t_candidates: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let ds = &dataset.inner;
        let split: QuerySplit = split.parse().map_err(PyValueError::new_err)?;
        let known = ds.known();
        let built = self.scorer(ds, mode)?;
        let report = match &built {
            Built::Student(s) => mrr_retrieval(s, &ds.catalog, &ds.test, &ds.train, &known, t_candidates, ds.seed, split),
            Built::Teacher(s) => mrr_retrieval(s, &ds.catalog, &ds.test, &ds.train, &known, t_candidates, ds.seed, split),
        }
        .map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("mrr", report.mrr)?;
        d.set_item("n_queries", report.n_queries)?;
        d.set_item("t_candidates", report.t_candidates)?;
        Ok(d)
    }

    /// Continues training for `epochs` more epochs.
    fn resume(&self, py: Python<'_>, dataset: &PyDataset, epochs: usize) -> PyResult<PyModel> {
        let ds = &dataset.inner;
        let ckpt = self.inner.clone();
        let outcome = py
            .detach(|| resume(&ds.catalog, &ds.train, &ds.valid, &ds.rules, ckpt, epochs, &mut |_, _, _| {}))
            .map_err(py_err)?;
        Ok(PyModel {
            inner: outcome.selected(),
        })
    }
}

fn per_rule<S: outfit_compat::eval::TripletScorer>(
    s: &S,
    ds: &Dataset,
    triplets: &[outfit_compat::catalog::Triplet],
) -> outfit_compat::Result<Option<Vec<(String, f64)>>> {
    if ds.rules.is_empty() {
        return Ok(None);
    }
    let by_id = per_rule_eval(s, &ds.rules, &ds.catalog, triplets)?;
    Ok(Some(
        by_id
            .into_iter()
            .map(|(id, auc)| (ds.rules.get(id).map(|r| r.to_string()).unwrap_or_default(), auc))
            .collect(),
    ))
}

/// Trains on the dataset's train split and returns the selected epoch.
#[pyfunction]
#[pyo3(signature = (
    dataset, epochs=40, seed=0, mode="akd", rho_max=None, rho_alpha=None, c=None,
    lambda_reg=None, lr=None, batch=None, last=false
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    dataset: &PyDataset,
    epochs: usize,
    seed: u64,
    mode: &str,
    rho_max: Option<f64>,
    rho_alpha: Option<f64>,
    c: Option<f64>,
    lambda_reg: Option<f64>,
    lr: Option<f64>,
    batch: Option<usize>,
    last: bool,
) -> PyResult<PyModel> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        mode: match mode {
            "akd" => TrainMode::Akd,
            "dbpr" => TrainMode::Dbpr,
            other => return Err(PyValueError::new_err(format!("mode must be 'akd' or 'dbpr', got {other:?}"))),
        },
        epochs,
        seed,
        rho_max: rho_max.unwrap_or(d.rho_max),
        rho_alpha: rho_alpha.unwrap_or(d.rho_alpha),
        c: c.unwrap_or(d.c),
        lambda_reg: lambda_reg.unwrap_or(d.lambda_reg),
        learning_rate: lr.unwrap_or(d.learning_rate),
        batch_size: batch.unwrap_or(d.batch_size),
        selection: if last { Selection::Last } else { Selection::BestValid },
        ..d
    };
    let ds = &dataset.inner;
    let outcome = py
        .detach(|| train_with_observer(&ds.catalog, &ds.train, &ds.valid, &ds.rules, &cfg, &mut |_, _, _| {}))
        .map_err(py_err)?;
    Ok(PyModel {
        inner: outcome.selected(),
    })
}

#[pymodule]
fn outfit_compat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("OutfitError", m.py().get_type::<OutfitError>())?;
    Ok(())
}
