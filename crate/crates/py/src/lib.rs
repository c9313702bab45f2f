//! Python bindings for the clustering engine: cohort loading and
//! simulation, the divisive fit, and the evaluation metrics.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use trajclust::bpe;
use trajclust::cli::{build_model_context, exit_code_for, FitConfig};
use trajclust::data;
use trajclust::divisive::{run_dhbc, SurvivalModel};
use trajclust::posterior::SurvivalParams;

/// Validation-class errors surface as ValueError, numerical failures as
/// RuntimeError — mirroring the CLI's exit codes 2 and 3.
fn to_py(e: trajclust::Error) -> PyErr {
    if exit_code_for(&e) == 2 {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// A validated cohort: per-subject longitudinal blocks plus right-censored
/// survival records over a shared subject set.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Cohort {
    inner: data::Cohort,
}

#[pymethods]
impl Cohort {
    #[getter]
    fn variable_names(&self) -> Vec<String> {
        self.inner.variable_names.clone()
    }

    #[getter]
    fn event_names(&self) -> Vec<String> {
        self.inner.event_names.clone()
    }

    #[getter]
    fn covariate_names(&self) -> Vec<String> {
        self.inner.covariate_names.clone()
    }

    #[getter]
    fn subject_ids(&self) -> Vec<String> {
        self.inner.subjects.iter().map(|s| s.id.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Visit times of one subject.
    fn times(&self, subject: usize) -> PyResult<Vec<f64>> {
        let s = self
            .inner
            .subjects
            .get(subject)
            .ok_or_else(|| PyValueError::new_err("subject index out of range"))?;
        Ok(s.times.clone())
    }

    /// Response rows (one per visit, one column per variable).
    fn values(&self, subject: usize) -> PyResult<Vec<Vec<f64>>> {
        let s = self
            .inner
            .subjects
            .get(subject)
            .ok_or_else(|| PyValueError::new_err("subject index out of range"))?;
        Ok(s.y.row_iter().map(|r| r.iter().copied().collect()).collect())
    }

    /// (time, event) pairs for one event variable, aligned with
    /// `subject_ids`.
    fn survival(&self, event: usize) -> PyResult<Vec<(f64, u8)>> {
        let records = self
            .inner
            .survival
            .get(event)
            .ok_or_else(|| PyValueError::new_err("event index out of range"))?;
        Ok(records.iter().map(|r| (r.t, r.d)).collect())
    }

    /// Copy of the cohort without one longitudinal variable.
    fn drop_variable(&self, name: &str) -> PyResult<Cohort> {
        Ok(Cohort {
            inner: self.inner.drop_variable(name).map_err(to_py)?,
        })
    }

    /// Copy with the named static covariates regressed out of every
    /// longitudinal variable.
    fn project_out(&self, covariates: Vec<String>) -> PyResult<Cohort> {
        Ok(Cohort {
            inner: data::project_out_covariates(&self.inner, &covariates).map_err(to_py)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Cohort({} subjects, {} variables, {} event variables)",
            self.inner.len(),
            self.inner.h(),
            self.inner.event_names.len()
        )
    }
}

/// Load and validate a cohort from a longitudinal CSV plus one survival
/// CSV per event variable.
#[pyfunction]
#[pyo3(signature = (long, surv, covariates=None))]
fn load_cohort(long: &str, surv: Vec<String>, covariates: Option<&str>) -> PyResult<Cohort> {
    let paths: Vec<&str> = surv.iter().map(String::as_str).collect();
    let inner = data::load_cohort(
        std::path::Path::new(long),
        &paths,
        covariates.map(std::path::Path::new),
    )
    .map_err(to_py)?;
    Ok(Cohort { inner })
}

/// Simulate a synthetic cohort from a scenario in TOML form. Returns the
/// cohort and the planted labels.
#[pyfunction]
#[pyo3(signature = (scenario, seed=None))]
fn simulate(scenario: &str, seed: Option<u64>) -> PyResult<(Cohort, Vec<usize>)> {
    let mut scenario: data::SimScenario =
        toml::from_str(scenario).map_err(|e| PyValueError::new_err(e.to_string()))?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    let (inner, labels) = data::simulate_cohort(&scenario).map_err(to_py)?;
    Ok((Cohort { inner }, labels))
}

/// TOML for a two-population demo scenario (separated slopes and hazards).
#[pyfunction]
fn two_cluster_scenario(n_subjects: usize, h: usize, seed: u64) -> PyResult<String> {
    let scenario = data::SimScenario::two_cluster_demo(n_subjects, h, seed);
    toml::to_string(&scenario).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Result of a divisive run: the stable partition, its parameters, and
/// the per-concentration trace.
#[pyclass]
struct FitResult {
    #[pyo3(get)]
    labels: Vec<usize>,
    #[pyo3(get)]
    n_clusters: usize,
    /// (alpha, clusters, log posterior) at the end of each alpha step.
    #[pyo3(get)]
    alpha_trace: Vec<(f64, usize, f64)>,
    params: Vec<serde_json::Value>,
}

#[pymethods]
impl FitResult {
    /// Fitted parameters of one final cluster as a JSON string
    /// (`b`, `g`, `sigma2`, `omega`, and the survival model).
    fn cluster_params(&self, cluster: usize) -> PyResult<String> {
        let value = self
            .params
            .get(cluster)
            .ok_or_else(|| PyValueError::new_err("cluster index out of range"))?;
        Ok(value.to_string())
    }

    fn __repr__(&self) -> String {
        format!(
            "FitResult({} clusters over {} subjects)",
            self.n_clusters,
            self.labels.len()
        )
    }
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter()
        .map(|r| r.iter().copied().collect())
        .collect()
}

fn survival_json(params: &SurvivalParams) -> serde_json::Value {
    match params {
        SurvivalParams::Piecewise(h) => serde_json::json!({
            "model": "piecewise",
            "lambdas": h.lambdas,
        }),
        SurvivalParams::Weibull(w) => serde_json::json!({
            "model": "weibull",
            "shape": w.shape,
            "scale": w.scale,
        }),
    }
}

/// Run the divisive search on a cohort.
#[pyfunction]
#[pyo3(signature = (
    cohort,
    max_clusters=10,
    min_cluster_size=0,
    seed=0,
    grid_width=0.5,
    survival_model="piecewise",
))]
fn fit(
    cohort: &Cohort,
    max_clusters: usize,
    min_cluster_size: usize,
    seed: u64,
    grid_width: f64,
    survival_model: &str,
) -> PyResult<FitResult> {
    let mut config = FitConfig::default();
    config.max_clusters = max_clusters;
    config.min_cluster_size = min_cluster_size;
    config.seed = seed;
    config.grid_width = grid_width;
    config.survival_model = match survival_model {
        "piecewise" => SurvivalModel::Piecewise,
        "weibull" => SurvivalModel::Weibull,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown survival model '{other}' (expected piecewise or weibull)"
            )))
        }
    };

    let ctx = build_model_context(&cohort.inner, &config).map_err(to_py)?;
    let subjects = data::to_model_subjects(&cohort.inner, &ctx.design).map_err(to_py)?;
    let result = run_dhbc(&subjects, &ctx, &config.run_config()).map_err(to_py)?;

    let params = result
        .final_params
        .iter()
        .map(|p| {
            serde_json::json!({
                "b": matrix_rows(&p.lmm.b),
                "g": matrix_rows(p.lmm.g.as_matrix()),
                "sigma2": p.lmm.sigma2,
                "omega": matrix_rows(p.lmm.omega.as_matrix()),
                "survival": p.survival.iter().map(survival_json).collect::<Vec<_>>(),
            })
        })
        .collect();

    Ok(FitResult {
        n_clusters: result.final_params.len(),
        labels: result.final_labels,
        alpha_trace: result
            .per_alpha
            .iter()
            .map(|p| (p.alpha, p.k, p.log_posterior))
            .collect(),
        params,
    })
}

/// Kaplan-Meier product-limit curve as (time, survival, at_risk, events)
/// steps at the distinct event times.
#[pyfunction]
fn kaplan_meier(times: Vec<f64>, events: Vec<u8>) -> PyResult<Vec<(f64, f64, usize, usize)>> {
    if times.len() != events.len() {
        return Err(PyValueError::new_err("times and events must align"));
    }
    let records: Vec<bpe::SurvivalRecord> = times
        .iter()
        .zip(&events)
        .enumerate()
        .map(|(i, (&t, &d))| bpe::SurvivalRecord::new(format!("s{i}"), t, d))
        .collect::<Result<_, _>>()
        .map_err(to_py)?;
    let steps = bpe::kaplan_meier(&records).map_err(to_py)?;
    Ok(steps
        .iter()
        .map(|s| (s.time, s.survival, s.at_risk, s.events))
        .collect())
}

/// Chance-corrected agreement between two partitions (1 = identical).
#[pyfunction]
fn adjusted_rand_index(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    data::adjusted_rand_index(&a, &b).map_err(to_py)
}

/// Minimal number of subjects whose labels disagree under the best
/// cluster relabeling, as (count, fraction).
#[pyfunction]
fn membership_diff(a: Vec<usize>, b: Vec<usize>) -> PyResult<(usize, f64)> {
    data::membership_diff(&a, &b).map_err(to_py)
}

#[pymodule]
fn trajclust_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Cohort>()?;
    m.add_class::<FitResult>()?;
    m.add_function(wrap_pyfunction!(load_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(two_cluster_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(kaplan_meier, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_rand_index, m)?)?;
    m.add_function(wrap_pyfunction!(membership_diff, m)?)?;
    Ok(())
}
