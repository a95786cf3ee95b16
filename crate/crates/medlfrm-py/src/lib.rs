//! Python bindings for the medlfrm crate: dataset construction and I/O,
//! synthetic generation, fitting both model variants, scoring, and AUC.

use std::collections::HashSet;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use medlfrm::data::{self, RelationalDataset, SplitMask, Triple};
use medlfrm::model::{self, Mode, TrainConfig, TrainedModel};

fn to_py_err(e: medlfrm::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A multi-relational link dataset with optional pairwise side features.
#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: RelationalDataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(n_entities: usize, n_relations: usize) -> Self {
        PyDataset {
            inner: RelationalDataset::new(n_entities, n_relations),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::load_dataset(path).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        data::save_dataset(&self.inner, path).map_err(to_py_err)
    }

    fn add_link(&mut self, relation: usize, i: usize, j: usize, y: i8) -> PyResult<()> {
        self.inner.add_link(relation, i, j, y).map_err(to_py_err)
    }

    #[getter]
    fn n_entities(&self) -> usize {
        self.inner.n_entities
    }

    #[getter]
    fn n_relations(&self) -> usize {
        self.inner.n_relations
    }

    #[getter]
    fn n_links(&self) -> usize {
        self.inner.links.len()
    }

    /// All links as (relation, i, j, y) tuples.
    fn links(&self) -> Vec<(usize, usize, usize, i8)> {
        self.inner
            .links
            .iter()
            .map(|l| (l.relation, l.i, l.j, l.y))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n_entities={}, n_relations={}, n_links={})",
            self.inner.n_entities,
            self.inner.n_relations,
            self.inner.links.len()
        )
    }
}

/// A synthetic benchmark: the generated dataset plus its ground truth.
#[pyclass(name = "SynthData")]
struct PySynthData {
    inner: data::SynthData,
}

#[pymethods]
impl PySynthData {
    #[getter]
    fn dataset(&self) -> PyDataset {
        PyDataset {
            inner: self.inner.dataset.clone(),
        }
    }

    #[getter]
    fn link_density(&self) -> f64 {
        self.inner.link_density
    }

    /// Ground-truth discriminant z_i W z_j^T.
    fn oracle_score(&self, i: usize, j: usize) -> f64 {
        self.inner.oracle_score(i, j)
    }
}

/// A fitted model together with the split it was trained on.
#[pyclass(name = "Model")]
struct PyModel {
    inner: TrainedModel,
    dataset: RelationalDataset,
    heldout: Vec<Triple>,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.trace.len()
    }

    #[getter]
    fn objective_trace(&self) -> Vec<f64> {
        self.inner.trace.iter().map(|r| r.objective).collect()
    }

    #[getter]
    fn active_features(&self) -> usize {
        self.inner.trace.last().map_or(0, |r| r.active_features)
    }

    /// Held-out (relation, i, j) triples excluded from training.
    #[getter]
    fn heldout(&self) -> Vec<Triple> {
        self.heldout.clone()
    }

    /// Expected discriminant for one pair.
    fn score(&self, relation: usize, i: usize, j: usize) -> PyResult<f64> {
        let x = self
            .dataset
            .pair_features
            .as_ref()
            .and_then(|pf| pf.get(i, j));
        model::discriminant(&self.inner.state, relation, i, j, x).map_err(to_py_err)
    }

    /// (score, sign) per (relation, i, j) pair, with sign(0) = -1.
    fn predict(&self, pairs: Vec<Triple>) -> PyResult<Vec<(f64, i8)>> {
        model::predict(&self.inner, &self.dataset, &pairs).map_err(to_py_err)
    }

    /// AUC over the held-out links (raises if nothing was held out).
    fn heldout_auc(&self) -> PyResult<f64> {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let held: HashSet<Triple> = self.heldout.iter().copied().collect();
        for l in &self.dataset.links {
            if held.contains(&(l.relation, l.i, l.j)) {
                scores.push(self.score(l.relation, l.i, l.j)?);
                labels.push(l.y);
            }
        }
        data::auc(&scores, &labels).map_err(to_py_err)
    }
}

/// Generate the synthetic link-prediction benchmark.
#[pyfunction]
#[pyo3(signature = (n, k_true, seed, feature_density=0.3, weight_scale=1.0))]
fn synth(
    n: usize,
    k_true: usize,
    seed: u64,
    feature_density: f64,
    weight_scale: f64,
) -> PyResult<PySynthData> {
    Ok(PySynthData {
        inner: data::synth_generate(n, k_true, seed, feature_density, weight_scale)
            .map_err(to_py_err)?,
    })
}

/// Fit a model, optionally holding out a fraction of the links for scoring.
#[pyfunction]
#[pyo3(signature = (dataset, k, mode="medlfrm", c=1.0, ell=9.0, alpha=3.0,
                    symmetric=false, seed=0, max_outer=50, holdout_fraction=0.0))]
#[allow(clippy::too_many_arguments)]
fn fit(
    dataset: &PyDataset,
    k: usize,
    mode: &str,
    c: f64,
    ell: f64,
    alpha: f64,
    symmetric: bool,
    seed: u64,
    max_outer: usize,
    holdout_fraction: f64,
) -> PyResult<PyModel> {
    let mode = match mode {
        "medlfrm" => Mode::MedLfrm,
        "bayes" | "bayes_medlfrm" => Mode::BayesMedLfrm,
        other => {
            return Err(PyValueError::new_err(format!(
                "mode must be 'medlfrm' or 'bayes', got '{other}'"
            )))
        }
    };
    let mut config = TrainConfig::new(k, mode);
    config.c = c;
    config.ell = ell;
    config.alpha = alpha;
    config.symmetric = symmetric;
    config.seed = seed;
    config.max_outer = max_outer;

    let split = if holdout_fraction > 0.0 {
        data::split_holdout(&dataset.inner, holdout_fraction, seed).map_err(to_py_err)?
    } else {
        SplitMask::full(&dataset.inner)
    };
    let probe = if split.heldout.is_empty() {
        None
    } else {
        Some(&split.heldout)
    };
    let model = model::fit(&dataset.inner, &split, &config, probe).map_err(to_py_err)?;
    let mut heldout: Vec<Triple> = split.heldout.into_iter().collect();
    heldout.sort_unstable();
    Ok(PyModel {
        inner: model,
        dataset: dataset.inner.clone(),
        heldout,
    })
}

/// Mann-Whitney AUC from scores and +-1 labels.
#[pyfunction(name = "auc")]
fn auc_py(scores: Vec<f64>, labels: Vec<i8>) -> PyResult<f64> {
    data::auc(&scores, &labels).map_err(to_py_err)
}

#[pymodule]
fn medlfrm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PySynthData>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(auc_py, m)?)?;
    Ok(())
}
