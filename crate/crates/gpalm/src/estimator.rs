//! The extended-GEE solver: joint estimation of the parametric coefficients
//! and the spline coefficients of the additive components.
//!
//! The identity link has a one-shot generalized-least-squares solution; other
//! links are fit by Fisher scoring with step halving on the weighted
//! least-squares objective. Working-correlation parameters are re-estimated
//! by the method of moments between scoring rounds.

use nalgebra::{DMatrix, DVector};

use crate::basis::AdditiveSplineBasis;
use crate::covariance::{estimate_moments, CorrelationStructure, WorkingCovariance};
use crate::data::Dataset;
use crate::error::{Error, PartialFit, Result};
use crate::inference::{self, MeatKind};
use crate::solve::{block_reduction, solve_spd, SolveFlags};

/// Mean link: the map from the linear predictor to the conditional mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Identity,
    Log,
}

impl Link {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Link::Identity),
            "log" => Ok(Link::Log),
            other => Err(Error::Parameter(format!(
                "unknown link `{other}` (expected identity or log)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Log => "log",
        }
    }

    pub fn mu(&self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Log => eta.exp(),
        }
    }

    /// First derivative of the mean with respect to the linear predictor.
    pub fn dmu(&self, eta: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Log => eta.exp(),
        }
    }

    pub fn inverse(&self, mu: f64) -> f64 {
        match self {
            Link::Identity => mu,
            Link::Log => mu.ln(),
        }
    }
}

/// Knobs for the Fisher-scoring loop.
#[derive(Debug, Clone, Copy)]
pub struct FitConfig {
    pub max_iter: usize,
    /// Relative l-infinity change of the stacked parameter vector.
    pub tol: f64,
    /// Total scoring passes; the working-correlation parameters are
    /// re-estimated from residuals between passes.
    pub corr_update_rounds: usize,
    pub step_halving_max: usize,
    /// Linear predictors are clamped to this magnitude under the log link
    /// before exponentiation.
    pub eta_clamp: f64,
    /// Keep the supplied correlation parameter instead of estimating it
    /// (the dispersion is still updated).
    pub fix_rho: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iter: 100,
            tol: 1e-8,
            corr_update_rounds: 2,
            step_halving_max: 20,
            eta_clamp: 30.0,
            fix_rho: false,
        }
    }
}

/// Model-based information blocks `sum_i U' D V^-1 D U` split by parameter
/// group: `xx` is parametric-by-parametric, `xz` parametric-by-spline, `zz`
/// spline-by-spline.
#[derive(Debug, Clone)]
pub struct InfoBlocks {
    pub xx: DMatrix<f64>,
    pub xz: DMatrix<f64>,
    pub zz: DMatrix<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct FitDiagnostics {
    /// A ridge fallback was needed to factor a scoring or inference matrix.
    pub ridge_used: bool,
    /// Some linear predictor hit the clamp under the log link.
    pub eta_clamped: bool,
    /// Euclidean norm of the stacked estimating equations at the fit.
    pub ee_norm: f64,
    /// Accepted objective values, one trace per scoring round; each trace is
    /// non-increasing because the working covariance is fixed within a round.
    pub objective_traces: Vec<Vec<f64>>,
}

/// A converged extended-GEE fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta: DVector<f64>,
    /// Spline coefficients in the stacked per-dimension layout; each
    /// dimension's block is reported in the canonical sum-to-zero form.
    pub gamma: DVector<f64>,
    /// Working covariance used in the final scoring round.
    pub spec: WorkingCovariance,
    pub info: InfoBlocks,
    /// Sandwich covariance of the parametric coefficients.
    pub robust_cov: DMatrix<f64>,
    /// Model-based covariance: the inverse of `n` times the spline-based
    /// information estimate. Coincides with the sandwich when the working
    /// covariance is the truth.
    pub model_cov: DMatrix<f64>,
    /// Sandwich standard errors.
    pub se: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Weighted least-squares objective at the fit.
    pub objective: f64,
    pub linear_predictors: Vec<DVector<f64>>,
    /// Response-scale residuals `y - mu(eta)` per cluster.
    pub residuals: Vec<DVector<f64>>,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    pub fn theta(&self) -> DVector<f64> {
        stack(&self.beta, &self.gamma)
    }
}

/// One cluster's response and design matrices, precomputed for fitting.
#[derive(Debug, Clone)]
pub(crate) struct ClusterDesign {
    pub y: DVector<f64>,
    /// `[X Z]`, `m x (k + q)`.
    pub u: DMatrix<f64>,
    pub k: usize,
    pub obs_index: Vec<i64>,
}

impl ClusterDesign {
    pub fn m(&self) -> usize {
        self.y.len()
    }

    pub fn x(&self) -> DMatrix<f64> {
        self.u.columns(0, self.k).into_owned()
    }

    pub fn z(&self) -> DMatrix<f64> {
        self.u.columns(self.k, self.u.ncols() - self.k).into_owned()
    }
}

pub(crate) fn build_designs(
    dataset: &Dataset,
    basis: &AdditiveSplineBasis,
) -> Result<Vec<ClusterDesign>> {
    if dataset.d() != basis.n_dims() {
        return Err(Error::Shape(format!(
            "dataset has {} nonparametric dimensions, basis has {}",
            dataset.d(),
            basis.n_dims()
        )));
    }
    let k = dataset.k();
    let q = basis.total_dim();
    let p = k + q;
    if dataset.n_obs() < p {
        return Err(Error::Parameter(format!(
            "{} observations cannot identify {p} mean parameters",
            dataset.n_obs()
        )));
    }
    dataset
        .clusters
        .iter()
        .map(|c| {
            let z = basis.assemble_design(&c.t)?;
            let m = c.len();
            let mut u = DMatrix::zeros(m, p);
            u.view_mut((0, 0), (m, k)).copy_from(&c.x);
            u.view_mut((0, k), (m, q)).copy_from(&z);
            Ok(ClusterDesign { y: c.y.clone(), u, k, obs_index: c.obs_index.clone() })
        })
        .collect()
}

pub(crate) fn v_inverses(
    designs: &[ClusterDesign],
    spec: &WorkingCovariance,
) -> Result<Vec<DMatrix<f64>>> {
    designs
        .iter()
        .map(|d| spec.build_v_inverse(d.m(), &d.obs_index))
        .collect()
}

fn stack(beta: &DVector<f64>, gamma: &DVector<f64>) -> DVector<f64> {
    let mut theta = DVector::zeros(beta.len() + gamma.len());
    theta.rows_mut(0, beta.len()).copy_from(beta);
    theta.rows_mut(beta.len(), gamma.len()).copy_from(gamma);
    theta
}

/// Clamped linear predictor, mean, derivative, residual for one cluster.
pub(crate) struct ClusterState {
    pub eta_raw: DVector<f64>,
    pub dmu: DVector<f64>,
    pub resid: DVector<f64>,
    pub clamped: bool,
}

pub(crate) fn cluster_state(
    design: &ClusterDesign,
    link: Link,
    eta_clamp: f64,
    theta: &DVector<f64>,
) -> ClusterState {
    let eta_raw = &design.u * theta;
    let mut clamped = false;
    let m = design.m();
    let mut mu = DVector::zeros(m);
    let mut dmu = DVector::zeros(m);
    for j in 0..m {
        let eta = match link {
            Link::Identity => eta_raw[j],
            Link::Log => {
                let e = eta_raw[j].clamp(-eta_clamp, eta_clamp);
                if e != eta_raw[j] {
                    clamped = true;
                }
                e
            }
        };
        mu[j] = link.mu(eta);
        dmu[j] = link.dmu(eta);
    }
    let resid = &design.y - &mu;
    ClusterState { eta_raw, dmu, resid, clamped }
}

struct ScoreParts {
    s: DMatrix<f64>,
    g: DVector<f64>,
    clamped: bool,
}

fn assemble_score(
    designs: &[ClusterDesign],
    v_invs: &[DMatrix<f64>],
    link: Link,
    eta_clamp: f64,
    theta: &DVector<f64>,
) -> ScoreParts {
    let p = theta.len();
    let mut s = DMatrix::zeros(p, p);
    let mut g = DVector::zeros(p);
    let mut clamped = false;
    for (design, w) in designs.iter().zip(v_invs) {
        let st = cluster_state(design, link, eta_clamp, theta);
        clamped |= st.clamped;
        let du = match link {
            Link::Identity => design.u.clone(),
            Link::Log => {
                let mut du = design.u.clone();
                for j in 0..design.m() {
                    let scale = st.dmu[j];
                    du.row_mut(j).scale_mut(scale);
                }
                du
            }
        };
        let wdu = w * &du;
        s += du.transpose() * &wdu;
        g += wdu.transpose() * &st.resid;
    }
    ScoreParts { s, g, clamped }
}

fn objective_at(
    designs: &[ClusterDesign],
    v_invs: &[DMatrix<f64>],
    link: Link,
    eta_clamp: f64,
    theta: &DVector<f64>,
) -> f64 {
    designs
        .iter()
        .zip(v_invs)
        .map(|(design, w)| {
            let st = cluster_state(design, link, eta_clamp, theta);
            (w * &st.resid).dot(&st.resid)
        })
        .sum()
}

struct ScoringOutcome {
    theta: DVector<f64>,
    iterations: usize,
    objective: f64,
    trace: Vec<f64>,
    flags: SolveFlags,
    clamped: bool,
}

#[allow(clippy::too_many_arguments)]
fn scoring_rounds(
    designs: &[ClusterDesign],
    v_invs: &[DMatrix<f64>],
    link: Link,
    config: &FitConfig,
    reduction: &DMatrix<f64>,
    theta0: DVector<f64>,
    y_norm: f64,
) -> Result<ScoringOutcome> {
    let mut theta = theta0;
    let mut flags = SolveFlags::default();
    let mut clamped = false;
    let mut trace = Vec::new();
    let mut objective = objective_at(designs, v_invs, link, config.eta_clamp, &theta);
    trace.push(objective);
    let mut converged = false;
    let mut iterations = 0;
    let mut last_polish_g: Option<f64> = None;

    while iterations < config.max_iter {
        iterations += 1;
        let parts = assemble_score(designs, v_invs, link, config.eta_clamp, &theta);
        clamped |= parts.clamped;
        let s_red = reduction.transpose() * &parts.s * reduction;
        let g_red = reduction.transpose() * &parts.g;
        let g_red_mat = DMatrix::from_column_slice(g_red.len(), 1, g_red.as_slice());
        let delta_red = solve_spd(&s_red, &g_red_mat, &mut flags)?;
        let delta = reduction * DVector::from_column_slice(delta_red.as_slice());

        let scale = 1.0 + theta.amax();
        if delta.amax() / scale < config.tol {
            // converged once the estimating equations themselves are solved
            // to tolerance; otherwise polish with full steps (quadratically
            // small objective change) until the gradient stops improving,
            // which is the floating-point floor for this system's scale
            let g_norm = parts.g.norm();
            if g_norm <= 10.0 * config.tol * (1.0 + y_norm)
                || last_polish_g.is_some_and(|prev| g_norm > 0.5 * prev)
            {
                converged = true;
                break;
            }
            last_polish_g = Some(g_norm);
            theta += &delta;
            objective = objective_at(designs, v_invs, link, config.eta_clamp, &theta);
            trace.push(objective);
            continue;
        }
        last_polish_g = None;

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=config.step_halving_max {
            let cand = &theta + &delta * step;
            let cand_obj = objective_at(designs, v_invs, link, config.eta_clamp, &cand);
            if cand_obj <= objective + 1e-12 * (1.0 + objective.abs()) {
                theta = cand;
                objective = cand_obj;
                trace.push(objective);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no descent along the scoring direction: accept only if the
            // estimating equations are already essentially solved
            let g_norm = parts.g.norm();
            if g_norm <= 10.0 * config.tol * (1.0 + y_norm) {
                converged = true;
                break;
            }
            return Err(Error::NonConvergence(Box::new(PartialFit {
                beta: DVector::zeros(0),
                gamma: theta.clone(),
                iterations,
                objective,
                ee_norm: g_norm,
            })));
        }
    }

    if !converged && iterations >= config.max_iter {
        let parts = assemble_score(designs, v_invs, link, config.eta_clamp, &theta);
        return Err(Error::NonConvergence(Box::new(PartialFit {
            beta: DVector::zeros(0),
            gamma: theta.clone(),
            iterations,
            objective,
            ee_norm: parts.g.norm(),
        })));
    }

    Ok(ScoringOutcome { theta, iterations, objective, trace, flags, clamped })
}

/// Starting values: zeros for the identity link (the first scoring step then
/// lands on the GLS solution); for the log link, an independence GLS fit on
/// `log(max(y, floor))` pseudo-responses.
pub fn initialize(
    dataset: &Dataset,
    basis: &AdditiveSplineBasis,
    link: Link,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let k = dataset.k();
    let q = basis.total_dim();
    match link {
        Link::Identity => Ok((DVector::zeros(k), DVector::zeros(q))),
        Link::Log => {
            let mut min_pos = f64::INFINITY;
            let mut all_count_like = true;
            for c in &dataset.clusters {
                for &v in c.y.iter() {
                    if v > 0.0 {
                        min_pos = min_pos.min(v);
                    }
                    if v < 0.0 || v.fract() != 0.0 {
                        all_count_like = false;
                    }
                }
            }
            if !min_pos.is_finite() {
                return Err(Error::Initialization(
                    "log link requires at least one positive response".into(),
                ));
            }
            let floor = if all_count_like { 0.5 } else { 0.5 * min_pos };
            let mut designs = build_designs(dataset, basis)?;
            for d in designs.iter_mut() {
                d.y = d.y.map(|v| v.max(floor).ln());
            }
            let spec = WorkingCovariance::independence();
            let v_invs = v_inverses(&designs, &spec)?;
            let reduction = reduction_for(dataset, basis);
            let config = FitConfig { corr_update_rounds: 1, ..FitConfig::default() };
            let y_norm = designs.iter().map(|d| d.y.norm_squared()).sum::<f64>().sqrt();
            let out = scoring_rounds(
                &designs,
                &v_invs,
                Link::Identity,
                &config,
                &reduction,
                DVector::zeros(k + q),
                y_norm,
            )?;
            Ok((
                out.theta.rows(0, k).into_owned(),
                out.theta.rows(k, q).into_owned(),
            ))
        }
    }
}

fn reduction_for(dataset: &Dataset, basis: &AdditiveSplineBasis) -> DMatrix<f64> {
    let dims: Vec<usize> = basis.bases().iter().map(|b| b.dim()).collect();
    block_reduction(dataset.k(), &dims)
}

/// Exact generalized-least-squares solution for the identity link with the
/// working covariance as given (no moment re-estimation).
pub fn fit_identity(
    dataset: &Dataset,
    basis: &AdditiveSplineBasis,
    spec: &WorkingCovariance,
) -> Result<FitResult> {
    let config = FitConfig { corr_update_rounds: 1, ..FitConfig::default() };
    fit_gee_impl(dataset, basis, Link::Identity, spec, &config, false)
}

/// Fit the extended GEE. The working covariance starts from `spec`; between
/// scoring rounds its parameters are replaced by method-of-moments estimates
/// from the current residuals (the correlation is kept when
/// `config.fix_rho`).
pub fn fit_gee(
    dataset: &Dataset,
    basis: &AdditiveSplineBasis,
    link: Link,
    spec: &WorkingCovariance,
    config: &FitConfig,
) -> Result<FitResult> {
    fit_gee_impl(dataset, basis, link, spec, config, true)
}

fn fit_gee_impl(
    dataset: &Dataset,
    basis: &AdditiveSplineBasis,
    link: Link,
    spec: &WorkingCovariance,
    config: &FitConfig,
    update_moments: bool,
) -> Result<FitResult> {
    let designs = build_designs(dataset, basis)?;
    let max_m = dataset.max_cluster_size();
    spec.validate(max_m)?;
    let k = dataset.k();
    let q = basis.total_dim();
    let p = k + q;
    let reduction = reduction_for(dataset, basis);
    let y_norm = designs.iter().map(|d| d.y.norm_squared()).sum::<f64>().sqrt();

    let (beta0, gamma0) = initialize(dataset, basis, link)?;
    let mut theta = stack(&beta0, &gamma0);
    let mut current = *spec;
    let mut v_invs = v_inverses(&designs, &current)?;

    let rounds = config.corr_update_rounds.max(1);
    let mut traces = Vec::with_capacity(rounds);
    let mut iterations = 0;
    let mut flags = SolveFlags::default();
    let mut clamped = false;
    let mut objective = 0.0;

    for round in 0..rounds {
        let out = scoring_rounds(&designs, &v_invs, link, config, &reduction, theta, y_norm)
            .map_err(|e| restore_partial(e, k))?;
        theta = out.theta;
        iterations += out.iterations;
        objective = out.objective;
        traces.push(out.trace);
        flags.ridge_used |= out.flags.ridge_used;
        clamped |= out.clamped;

        if update_moments && round + 1 < rounds {
            let residuals: Vec<DVector<f64>> = designs
                .iter()
                .map(|d| cluster_state(d, link, config.eta_clamp, &theta).resid)
                .collect();
            let obs_index: Vec<Vec<i64>> =
                designs.iter().map(|d| d.obs_index.clone()).collect();
            let (rho, sigma2) = if current.structure == CorrelationStructure::Independence {
                let (_, s2) = estimate_moments(
                    &residuals,
                    &obs_index,
                    CorrelationStructure::Independence,
                    p,
                )?;
                (0.0, s2)
            } else if config.fix_rho {
                let (_, s2) = estimate_moments(
                    &residuals,
                    &obs_index,
                    CorrelationStructure::Independence,
                    p,
                )?;
                (current.rho, s2)
            } else {
                estimate_moments(&residuals, &obs_index, current.structure, p)?
            };
            // a zero dispersion (exact interpolation) carries no scale
            // information; keep the current one
            let sigma2 = if sigma2 > 0.0 && sigma2.is_finite() {
                sigma2
            } else {
                current.sigma2
            };
            current = WorkingCovariance::new(current.structure, rho, sigma2);
            v_invs = v_inverses(&designs, &current)?;
        }
    }

    let beta = theta.rows(0, k).into_owned();
    let gamma = theta.rows(k, q).into_owned();

    let dims: Vec<usize> = basis.bases().iter().map(|b| b.dim()).collect();
    let pieces = inference::compute_pieces(
        &designs,
        &v_invs,
        &dims,
        &current,
        link,
        config.eta_clamp,
        &theta,
        MeatKind::ResidualOuter,
    )?;
    flags.ridge_used |= pieces.ridge_used;

    let final_score = assemble_score(&designs, &v_invs, link, config.eta_clamp, &theta);
    let states: Vec<ClusterState> = designs
        .iter()
        .map(|d| cluster_state(d, link, config.eta_clamp, &theta))
        .collect();

    let se = DVector::from_fn(k, |i, _| pieces.robust_cov[(i, i)].max(0.0).sqrt());
    Ok(FitResult {
        beta,
        gamma,
        spec: current,
        info: pieces.info,
        robust_cov: pieces.robust_cov,
        model_cov: pieces.bread,
        se,
        converged: true,
        iterations,
        objective,
        linear_predictors: states.iter().map(|s| s.eta_raw.clone()).collect(),
        residuals: states.iter().map(|s| s.resid.clone()).collect(),
        diagnostics: FitDiagnostics {
            ridge_used: flags.ridge_used,
            eta_clamped: clamped,
            ee_norm: final_score.g.norm(),
            objective_traces: traces,
        },
    })
}

/// Split the stacked partial iterate carried by a non-convergence error back
/// into its beta and gamma parts.
fn restore_partial(err: Error, k: usize) -> Error {
    match err {
        Error::NonConvergence(mut partial) => {
            let theta = partial.gamma.clone();
            if theta.len() >= k {
                partial.beta = theta.rows(0, k).into_owned();
                partial.gamma = theta.rows(k, theta.len() - k).into_owned();
            }
            Error::NonConvergence(partial)
        }
        other => other,
    }
}

/// Euclidean norm of the stacked estimating equations at `(beta, gamma)`;
/// near zero at a fit, used as a convergence diagnostic and test oracle.
pub fn ee_residual(
    dataset: &Dataset,
    basis: &AdditiveSplineBasis,
    link: Link,
    spec: &WorkingCovariance,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
) -> Result<f64> {
    let designs = build_designs(dataset, basis)?;
    let v_invs = v_inverses(&designs, spec)?;
    let theta = stack(beta, gamma);
    let parts = assemble_score(&designs, &v_invs, link, FitConfig::default().eta_clamp, &theta);
    Ok(parts.g.norm())
}
