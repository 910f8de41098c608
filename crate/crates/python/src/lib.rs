//! Python bindings for the `critcascade` simulation library.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use critcascade::cascade;
use critcascade::envelope::{self, IntegralClass, PsiSpec};
use critcascade::experiment::{self, ExperimentConfig};
use critcascade::offspring::{self, Atom, CountLaw, DiagnosticMethod, Displacement, LawKind};
use critcascade::rng::{derive_stream, purpose};
use critcascade::spine::{self, SideSubtrees};
use critcascade::tree;
use critcascade::verify::{Suite, SuiteOptions};
use critcascade::walk;
use critcascade::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::WorkerFailure { .. } | Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn count_law(count: Option<Vec<f64>>) -> PyResult<CountLaw> {
    match count {
        Some(p) => CountLaw::new(p).map_err(err),
        None => Ok(CountLaw::fixed(2)),
    }
}

/// Offspring point-process law: a count law with i.i.d. displacements.
#[pyclass(name = "OffspringLaw", frozen)]
struct PyLaw(offspring::OffspringLaw);

#[pymethods]
impl PyLaw {
    /// Two children on `{-d, 0, d}` with `d = arccosh 2`.
    #[staticmethod]
    fn lattice() -> Self {
        Self(offspring::lattice_boundary_model())
    }

    /// Two children with `N(2 log 2, 2 log 2)` displacements.
    #[staticmethod]
    fn gaussian() -> Self {
        Self(offspring::gaussian_boundary_model())
    }

    #[staticmethod]
    #[pyo3(signature = (values, probs, count=None))]
    fn finite_atom(values: Vec<f64>, probs: Vec<f64>, count: Option<Vec<f64>>) -> PyResult<Self> {
        if values.len() != probs.len() {
            return Err(PyValueError::new_err("values and probs differ in length"));
        }
        let atoms = values.into_iter().zip(probs).map(|(v, p)| Atom::new(v, p)).collect();
        offspring::OffspringLaw::new(LawKind::FiniteAtom, count_law(count)?, Displacement::Atoms(atoms))
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (mean, var, count=None))]
    fn gaussian_binary(mean: f64, var: f64, count: Option<Vec<f64>>) -> PyResult<Self> {
        offspring::OffspringLaw::new(LawKind::GaussianBinary, count_law(count)?, Displacement::Gaussian { mean, var })
            .map(Self)
            .map_err(err)
    }

    /// Affine boundary normalization, or `walk_template=True` to read the
    /// template as the associated walk's step law.
    #[pyo3(signature = (walk_template=false))]
    fn normalize(&self, walk_template: bool) -> PyResult<Self> {
        let tol = offspring::DEFAULT_NORMALIZE_TOL;
        let out = if walk_template {
            offspring::normalize_walk_template(&self.0, tol)
        } else {
            offspring::normalize_to_boundary(&self.0, tol)
        };
        out.map(Self).map_err(err)
    }

    /// Boundary moments; `samples > 0` switches to Monte Carlo.
    #[pyo3(signature = (samples=0, seed=1))]
    fn diagnostics(&self, samples: usize, seed: u64) -> PyResult<BTreeMap<String, f64>> {
        let method = match (samples, self.0.displacement()) {
            (0, Displacement::Atoms(_)) => DiagnosticMethod::ClosedForm,
            (0, Displacement::Gaussian { .. }) => DiagnosticMethod::Quadrature,
            _ => DiagnosticMethod::MonteCarlo,
        };
        let mut rng = derive_stream(seed, 0, purpose::DIAGNOSTICS);
        let d = offspring::boundary_diagnostics(&self.0, method, samples, &mut rng).map_err(err)?;
        Ok(BTreeMap::from([
            ("m0".into(), d.m0),
            ("m1".into(), d.m1),
            ("sigma2".into(), d.sigma2),
            ("m0_se".into(), d.m0_se),
            ("m1_se".into(), d.m1_se),
            ("sigma2_se".into(), d.sigma2_se),
        ]))
    }

    fn rho(&self, beta: f64) -> f64 {
        self.0.rho(beta)
    }

    #[getter]
    fn lattice_span(&self) -> Option<f64> {
        self.0.lattice_span()
    }

    fn walk(&self) -> PyResult<PyWalk> {
        walk::associated_walk(&self.0).map(PyWalk).map_err(err)
    }
}

/// The associated random walk of a boundary-case law.
#[pyclass(name = "Walk", frozen)]
struct PyWalk(walk::WalkLaw);

#[pymethods]
impl PyWalk {
    #[getter]
    fn variance(&self) -> f64 {
        self.0.variance()
    }

    #[getter]
    fn mean(&self) -> f64 {
        self.0.mean()
    }

    /// Renewal function of the strict descending ladder heights.
    #[pyo3(signature = (reps=200_000, seed=1))]
    fn renewal(&self, reps: usize, seed: u64) -> PyResult<PyRenewal> {
        walk::default_renewal(&self.0, reps, seed).map(PyRenewal).map_err(err)
    }

    /// Paths `S_0, ..., S_n` of the walk conditioned to stay above `-alpha`.
    #[pyo3(signature = (renewal, alpha, n, reps, seed=1))]
    fn conditioned_paths(
        &self,
        renewal: &PyRenewal,
        alpha: f64,
        n: usize,
        reps: usize,
        seed: u64,
    ) -> PyResult<Vec<Vec<f64>>> {
        let paths = walk::conditioned_paths(&self.0, &renewal.0, alpha, n, reps, seed).map_err(err)?;
        Ok(paths
            .into_iter()
            .map(|p| std::iter::once(p.start).chain(p.states).collect())
            .collect())
    }

    /// Stay-above probability implied by the renewal function.
    fn stay_above_probability(&self, renewal: &PyRenewal, alpha: f64, y: f64, x: f64) -> PyResult<f64> {
        walk::stay_above_probability(&renewal.0, alpha, y, x).map_err(err)
    }
}

#[pyclass(name = "Renewal", frozen)]
struct PyRenewal(walk::RenewalTable);

#[pymethods]
impl PyRenewal {
    fn __call__(&self, u: f64) -> f64 {
        self.0.eval(u)
    }

    fn se(&self, u: f64) -> f64 {
        self.0.se_eval(u)
    }

    #[getter]
    fn c0(&self) -> f64 {
        self.0.c0()
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.0.method().name()
    }
}

/// A grown tree, kept generation by generation.
#[pyclass(name = "Tree", frozen)]
struct PyTree(tree::BrwTree);

#[pymethods]
impl PyTree {
    /// Grows replica `replica` of the stream family keyed by `seed`.
    #[staticmethod]
    #[pyo3(signature = (law, depth, seed=1, replica=0, cap=tree::DEFAULT_CAP))]
    fn grow(law: &PyLaw, depth: usize, seed: u64, replica: u64, cap: usize) -> PyResult<Self> {
        tree::grow_replica(&law.0, depth, cap, seed, replica).map(Self).map_err(err)
    }

    #[getter]
    fn depth(&self) -> usize {
        self.0.depth()
    }

    fn populations(&self) -> Vec<usize> {
        self.0.populations()
    }

    fn positions(&self, n: usize) -> PyResult<Vec<f64>> {
        self.0.generation_positions(n).map(<[f64]>::to_vec).map_err(err)
    }

    fn additive(&self, n: usize) -> PyResult<f64> {
        cascade::additive_martingale(&self.0, n).map_err(err)
    }

    fn derivative(&self, n: usize) -> PyResult<f64> {
        cascade::derivative_martingale(&self.0, n).map_err(err)
    }

    fn truncated(&self, n: usize, alpha: f64, renewal: &PyRenewal) -> PyResult<f64> {
        cascade::truncated_martingale(&self.0, n, alpha, &renewal.0).map_err(err)
    }

    /// `(Z_n(beta), suggested normalization)`.
    fn partition_function(&self, beta: f64, n: usize) -> PyResult<(f64, f64)> {
        let p = cascade::partition_function(&self.0, beta, n).map_err(err)?;
        Ok((p.z, p.suggested_normalization))
    }
}

/// One spine decomposition sample.
#[pyclass(name = "Spine", frozen)]
struct PySpine(spine::SpineRealization);

#[pymethods]
impl PySpine {
    #[getter]
    fn positions(&self) -> Vec<f64> {
        self.0.positions.clone()
    }

    #[getter]
    fn dhat(&self) -> Vec<f64> {
        self.0.dhat.clone()
    }

    /// `-log mu(B(w_n))` for `n = 0, ..., upto`.
    fn neg_log_masses(&self, upto: usize) -> Vec<f64> {
        self.0.neg_log_masses(upto)
    }
}

#[pyfunction]
#[pyo3(signature = (law, renewal, alpha, n, reps, seed=1, side_depth=spine::DEFAULT_SIDE_DEPTH, side_cap=spine::DEFAULT_SIDE_CAP))]
#[allow(clippy::too_many_arguments)]
fn sample_spines(
    law: &PyLaw,
    renewal: &PyRenewal,
    alpha: f64,
    n: usize,
    reps: usize,
    seed: u64,
    side_depth: usize,
    side_cap: usize,
) -> PyResult<Vec<PySpine>> {
    let sigma2 = walk::associated_walk(&law.0).map_err(err)?.variance();
    let side = SideSubtrees::Grow {
        depth: side_depth,
        cap: side_cap,
    };
    let spines =
        spine::sample_spines(&law.0, &renewal.0, alpha, n, side, sigma2, reps, seed).map_err(err)?;
    Ok(spines.into_iter().map(PySpine).collect())
}

fn psi_spec(family: &str, k: usize, eps: f64) -> PyResult<PsiSpec> {
    let spec = match family {
        "iterated" => PsiSpec::iterated(k),
        "perturbed" => PsiSpec::perturbed(k, eps),
        other => return Err(PyValueError::new_err(format!("unknown psi family '{other}'"))),
    };
    spec.validate().map_err(err)?;
    Ok(spec)
}

/// `psi(t)` for the built-in families `iterated` and `perturbed`.
#[pyfunction]
#[pyo3(signature = (family, k, t, eps=0.0))]
fn psi_value(family: &str, k: usize, t: f64, eps: f64) -> PyResult<f64> {
    envelope::psi_value(&psi_spec(family, k, eps)?, t).map_err(err)
}

/// `"convergent"`, `"divergent"` or `"inconclusive"`.
#[pyfunction]
#[pyo3(signature = (family, k, eps=0.0))]
fn integral_test(family: &str, k: usize, eps: f64) -> PyResult<&'static str> {
    Ok(match envelope::integral_test(&psi_spec(family, k, eps)?).class {
        IntegralClass::Convergent => "convergent",
        IntegralClass::Divergent => "divergent",
        IntegralClass::Inconclusive => "inconclusive",
    })
}

/// Median of `S_N / sqrt(2 sigma^2 N log log N)` over paths `S_0..S_N`.
#[pyfunction]
fn lil_median(paths: Vec<Vec<f64>>, sigma2: f64) -> PyResult<f64> {
    envelope::lil_statistic(&paths, sigma2).map(|s| s.median).map_err(err)
}

/// Runs a TOML experiment config and returns the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (config_toml, out=None))]
fn run_experiment(py: Python<'_>, config_toml: &str, out: Option<std::path::PathBuf>) -> PyResult<String> {
    let mut cfg = ExperimentConfig::from_toml(config_toml).map_err(err)?;
    if let Some(o) = out {
        cfg.experiment.output = o;
    }
    let manifest = py.detach(|| experiment::run(&cfg)).map_err(err)?;
    serde_json::to_string(&manifest).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Runs the listed acceptance criteria; returns `(id, name, passed)` tuples.
#[pyfunction]
#[pyo3(signature = (criteria, seed=20_240_601, scale=1.0, workers=1))]
fn verify(py: Python<'_>, criteria: Vec<u8>, seed: u64, scale: f64, workers: usize) -> PyResult<Vec<(u8, String, bool)>> {
    py.detach(|| {
        let suite = Suite::new(SuiteOptions {
            seed,
            scale,
            workers,
            ..SuiteOptions::default()
        })?;
        suite
            .run_all(&criteria)
            .into_iter()
            .map(|r| r.map(|r| (r.id, r.name.to_string(), r.passed)))
            .collect::<critcascade::Result<Vec<_>>>()
    })
    .map_err(err)
}

#[pymodule]
fn critcascade_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLaw>()?;
    m.add_class::<PyWalk>()?;
    m.add_class::<PyRenewal>()?;
    m.add_class::<PyTree>()?;
    m.add_class::<PySpine>()?;
    m.add_function(wrap_pyfunction!(sample_spines, m)?)?;
    m.add_function(wrap_pyfunction!(psi_value, m)?)?;
    m.add_function(wrap_pyfunction!(integral_test, m)?)?;
    m.add_function(wrap_pyfunction!(lil_median, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
