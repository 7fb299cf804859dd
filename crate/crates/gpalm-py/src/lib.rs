//! Python bindings: datasets, spline bases, model fits and simulation
//! studies as plain Python objects over `Vec<f64>`/lists.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use gpalm::cv::{cross_validate, CvPlan, KnotGrid};
use gpalm::sim::{run_study, KnotSelection, Setup, SimulationConfig};
use gpalm::{
    fit_gee, wald_report, AdditiveSplineBasis, BsplineBasis1d, ClusterData, CorrelationStructure,
    CsvSchema, FitConfig, FitResult, KnotRule, Link, WorkingCovariance,
};

fn err(e: gpalm::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A univariate B-spline basis built from sample values.
#[pyclass(name = "SplineBasis")]
struct PySplineBasis {
    inner: BsplineBasis1d,
}

#[pymethods]
impl PySplineBasis {
    #[new]
    #[pyo3(signature = (samples, degree = 3, n_interior = 3, rule = "quantile"))]
    fn new(samples: Vec<f64>, degree: usize, n_interior: usize, rule: &str) -> PyResult<Self> {
        let rule = KnotRule::parse(rule).map_err(err)?;
        let inner =
            BsplineBasis1d::from_samples(&samples, degree, n_interior, rule).map_err(err)?;
        Ok(PySplineBasis { inner })
    }

    /// All basis function values at `t` (clamped to the boundary).
    fn eval(&self, t: f64) -> Vec<f64> {
        self.inner.eval(t).iter().copied().collect()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn interior_knots(&self) -> Vec<f64> {
        self.inner.interior_knots().to_vec()
    }

    #[getter]
    fn boundary(&self) -> (f64, f64) {
        self.inner.boundary()
    }
}

/// A clustered dataset.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: gpalm::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Read the long-format CSV interchange file.
    #[staticmethod]
    #[pyo3(signature = (path, cluster, y, x_cols, t_cols, order = None, has_intercept = false))]
    fn read_csv(
        path: &str,
        cluster: &str,
        y: &str,
        x_cols: Vec<String>,
        t_cols: Vec<String>,
        order: Option<String>,
        has_intercept: bool,
    ) -> PyResult<Self> {
        let schema = CsvSchema {
            cluster: cluster.into(),
            y: y.into(),
            x: x_cols,
            t: t_cols,
            order,
            has_intercept,
        };
        let inner = gpalm::Dataset::read_csv_path(path, &schema).map_err(err)?;
        Ok(PyDataset { inner })
    }

    /// Build a dataset from aligned long-format rows. `x_rows` holds the
    /// parametric covariates (the intercept is injected), `t_rows` the
    /// nonparametric ones. Rows group by cluster id in order of first
    /// appearance.
    #[staticmethod]
    fn from_long(
        cluster_ids: Vec<String>,
        y: Vec<f64>,
        x_rows: Vec<Vec<f64>>,
        t_rows: Vec<Vec<f64>>,
    ) -> PyResult<Self> {
        let n = cluster_ids.len();
        if y.len() != n || x_rows.len() != n || t_rows.len() != n {
            return Err(PyValueError::new_err(format!(
                "row counts disagree: {} ids, {} y, {} x, {} t",
                n,
                y.len(),
                x_rows.len(),
                t_rows.len()
            )));
        }
        if n == 0 {
            return Err(PyValueError::new_err("empty dataset"));
        }
        let k_declared = x_rows[0].len();
        let d = t_rows[0].len();
        let mut order: Vec<String> = Vec::new();
        let mut grouped: std::collections::HashMap<String, Vec<usize>> =
            std::collections::HashMap::new();
        for (i, id) in cluster_ids.iter().enumerate() {
            grouped
                .entry(id.clone())
                .or_insert_with(|| {
                    order.push(id.clone());
                    Vec::new()
                })
                .push(i);
        }
        let clusters = order
            .iter()
            .map(|id| {
                let rows = &grouped[id];
                let m = rows.len();
                let yv = DVector::from_fn(m, |r, _| y[rows[r]]);
                let x = DMatrix::from_fn(m, k_declared + 1, |r, c| {
                    if c == 0 {
                        1.0
                    } else {
                        x_rows[rows[r]][c - 1]
                    }
                });
                let t = DMatrix::from_fn(m, d, |r, c| t_rows[rows[r]][c]);
                ClusterData::new(id.clone(), yv, x, t, (0..m as i64).collect())
            })
            .collect::<gpalm::Result<Vec<_>>>()
            .map_err(err)?;
        let mut x_names = vec!["intercept".to_string()];
        x_names.extend((1..=k_declared).map(|j| format!("x{j}")));
        let t_names = (1..=d).map(|j| format!("t{j}")).collect();
        let inner = gpalm::Dataset::new(clusters, x_names, t_names).map_err(err)?;
        Ok(PyDataset { inner })
    }

    #[getter]
    fn n_clusters(&self) -> usize {
        self.inner.n_clusters()
    }

    #[getter]
    fn n_obs(&self) -> usize {
        self.inner.n_obs()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    /// Data findings (non-finite values, degenerate support, ...), one
    /// string per finding; empty for a well-formed dataset.
    fn validate(&self) -> Vec<String> {
        self.inner
            .validate()
            .into_iter()
            .map(|f| f.message)
            .collect()
    }
}

/// A fitted model.
#[pyclass(name = "FitResult")]
struct PyFitResult {
    fit: FitResult,
    basis: AdditiveSplineBasis,
    x_names: Vec<String>,
    chosen_knots: Vec<usize>,
}

#[pymethods]
impl PyFitResult {
    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.fit.beta.iter().copied().collect()
    }

    #[getter]
    fn se(&self) -> Vec<f64> {
        self.fit.se.iter().copied().collect()
    }

    #[getter]
    fn rho(&self) -> f64 {
        self.fit.spec.rho
    }

    #[getter]
    fn sigma2(&self) -> f64 {
        self.fit.spec.sigma2
    }

    #[getter]
    fn converged(&self) -> bool {
        self.fit.converged
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.fit.iterations
    }

    #[getter]
    fn objective(&self) -> f64 {
        self.fit.objective
    }

    #[getter]
    fn knots(&self) -> Vec<usize> {
        self.chosen_knots.clone()
    }

    /// Sandwich covariance of the parametric coefficients, row-major.
    #[getter]
    fn robust_cov(&self) -> Vec<Vec<f64>> {
        matrix_rows(&self.fit.robust_cov)
    }

    /// Model-based covariance (inverse spline information), row-major.
    #[getter]
    fn model_cov(&self) -> Vec<Vec<f64>> {
        matrix_rows(&self.fit.model_cov)
    }

    /// Fitted additive component `d` evaluated on a grid.
    fn component(&self, d: usize, grid: Vec<f64>) -> PyResult<Vec<f64>> {
        self.basis
            .eval_component(&self.fit.gamma, d, &grid)
            .map_err(err)
    }

    /// Coefficient table rows: (name, estimate, sandwich SE, z).
    fn wald(&self) -> Vec<(String, f64, f64, f64)> {
        wald_report(&self.x_names, &self.fit.beta, &self.fit.robust_cov)
            .into_iter()
            .map(|r| (r.name, r.estimate, r.se, r.z))
            .collect()
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Fit a partially linear additive model by spline-based estimating
/// equations. `knots` fixes per-dimension interior-knot counts; `cv = True`
/// selects them by delete-cluster-out cross-validation over `knot_grid`.
#[pyfunction]
#[pyo3(signature = (
    dataset,
    link = "identity",
    corr = "wi",
    rho = None,
    degree = 3,
    knots = None,
    cv = false,
    knot_grid = None,
    folds = 5,
    seed = 0,
    tol = 1e-8,
    max_iter = 100,
    corr_rounds = 2,
))]
#[allow(clippy::too_many_arguments)]
fn fit(
    dataset: &PyDataset,
    link: &str,
    corr: &str,
    rho: Option<f64>,
    degree: usize,
    knots: Option<Vec<usize>>,
    cv: bool,
    knot_grid: Option<Vec<usize>>,
    folds: usize,
    seed: u64,
    tol: f64,
    max_iter: usize,
    corr_rounds: usize,
) -> PyResult<PyFitResult> {
    let link = Link::parse(link).map_err(err)?;
    let structure = CorrelationStructure::parse(corr).map_err(err)?;
    let data = &dataset.inner;
    let config = FitConfig {
        max_iter,
        tol,
        corr_update_rounds: corr_rounds,
        fix_rho: rho.is_some(),
        ..FitConfig::default()
    };
    let knot_counts = if cv {
        let plan = CvPlan {
            folds,
            grid: KnotGrid::Shared(knot_grid.unwrap_or_else(|| (0..=10).collect())),
            seed,
        };
        cross_validate(data, link, structure, rho, &plan, degree, KnotRule::Quantile, &config)
            .map_err(err)?
            .chosen
    } else {
        match knots {
            Some(k) if k.len() == 1 => vec![k[0]; data.d()],
            Some(k) => k,
            None => vec![3; data.d()],
        }
    };
    if knot_counts.len() != data.d() {
        return Err(PyValueError::new_err(format!(
            "{} knot counts for {} nonparametric dimensions",
            knot_counts.len(),
            data.d()
        )));
    }
    let basis =
        AdditiveSplineBasis::from_pooled(&data.pooled_t(), degree, &knot_counts, KnotRule::Quantile)
            .map_err(err)?;
    let spec = WorkingCovariance::new(structure, rho.unwrap_or(0.0), 1.0);
    let fit = fit_gee(data, &basis, link, &spec, &config).map_err(err)?;
    Ok(PyFitResult {
        fit,
        basis,
        x_names: data.x_names.clone(),
        chosen_knots: knot_counts,
    })
}

/// A finished Monte Carlo study.
#[pyclass(name = "StudyReport")]
struct PyStudyReport {
    aggregate_csv: String,
    aggregate_csv_x1e5: String,
    replications_csv: String,
    failures: usize,
}

#[pymethods]
impl PyStudyReport {
    #[getter]
    fn aggregate_csv(&self) -> &str {
        &self.aggregate_csv
    }

    #[getter]
    fn aggregate_csv_x1e5(&self) -> &str {
        &self.aggregate_csv_x1e5
    }

    #[getter]
    fn replications_csv(&self) -> &str {
        &self.replications_csv
    }

    #[getter]
    fn failures(&self) -> usize {
        self.failures
    }
}

/// Run a Monte Carlo study on one of the built-in setups (s1..s5).
#[pyfunction]
#[pyo3(signature = (
    setup = "s1",
    n = 50,
    rho = 0.5,
    reps = 5,
    seed = 0,
    structures = vec!["wi".to_string(), "ar1".to_string()],
    error_sd = 1.0,
    fixed_knots = None,
    degree = 3,
))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    setup: &str,
    n: usize,
    rho: f64,
    reps: usize,
    seed: u64,
    structures: Vec<String>,
    error_sd: f64,
    fixed_knots: Option<usize>,
    degree: usize,
) -> PyResult<PyStudyReport> {
    let config = SimulationConfig {
        setup: Setup::parse(setup).map_err(err)?,
        n,
        rho,
        replications: reps,
        seed,
        fit_structures: structures
            .iter()
            .map(|s| CorrelationStructure::parse(s))
            .collect::<gpalm::Result<Vec<_>>>()
            .map_err(err)?,
        error_sd,
        knots: match fixed_knots {
            Some(k) => KnotSelection::Fixed(k),
            None => KnotSelection::default(),
        },
        degree,
    };
    let report = run_study(&config).map_err(err)?;
    Ok(PyStudyReport {
        aggregate_csv: report.aggregate_csv(),
        aggregate_csv_x1e5: report.aggregate_csv_x1e5(),
        replications_csv: report.replications_csv(),
        failures: report.failures.len(),
    })
}

#[pymodule]
fn gpalm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySplineBasis>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyFitResult>()?;
    m.add_class::<PyStudyReport>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
