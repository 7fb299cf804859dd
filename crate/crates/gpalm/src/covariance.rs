//! Working covariance structures and moment estimation of their parameters.
//!
//! The working covariance of a cluster is `sigma2 * R(rho)` where `R` is one
//! of: identity (independence), compound symmetry (exchangeable), or a
//! first-order autoregressive correlation driven by observation-index lags.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Margin kept inside the positive-definite range when clipping a moment
/// estimate of the correlation parameter.
const RHO_CLIP_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationStructure {
    Independence,
    Exchangeable,
    Ar1,
}

impl CorrelationStructure {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "wi" => Ok(CorrelationStructure::Independence),
            "ex" => Ok(CorrelationStructure::Exchangeable),
            "ar1" => Ok(CorrelationStructure::Ar1),
            other => Err(Error::Parameter(format!(
                "unknown working correlation `{other}` (expected wi, ex, or ar1)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CorrelationStructure::Independence => "wi",
            CorrelationStructure::Exchangeable => "ex",
            CorrelationStructure::Ar1 => "ar1",
        }
    }

    /// Open interval of correlation values keeping the structure positive
    /// definite for clusters up to size `max_m`.
    pub fn valid_rho_range(&self, max_m: usize) -> (f64, f64) {
        match self {
            CorrelationStructure::Independence => (-1.0, 1.0),
            CorrelationStructure::Exchangeable => {
                let lo = if max_m > 1 { -1.0 / (max_m as f64 - 1.0) } else { -1.0 };
                (lo, 1.0)
            }
            CorrelationStructure::Ar1 => (-1.0, 1.0),
        }
    }
}

/// A working covariance specification: structure, correlation parameter, and
/// dispersion. Immutable once validated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkingCovariance {
    pub structure: CorrelationStructure,
    /// Ignored under independence.
    pub rho: f64,
    pub sigma2: f64,
}

impl WorkingCovariance {
    pub fn independence() -> Self {
        WorkingCovariance {
            structure: CorrelationStructure::Independence,
            rho: 0.0,
            sigma2: 1.0,
        }
    }

    pub fn new(structure: CorrelationStructure, rho: f64, sigma2: f64) -> Self {
        WorkingCovariance { structure, rho, sigma2 }
    }

    /// Check the parameters against the largest cluster size in play,
    /// including a direct positive-definiteness check at that size.
    pub fn validate(&self, max_m: usize) -> Result<()> {
        if !self.sigma2.is_finite() || self.sigma2 <= 0.0 {
            return Err(Error::Parameter(format!(
                "dispersion must be a positive real, got {}",
                self.sigma2
            )));
        }
        let (lo, hi) = self.structure.valid_rho_range(max_m);
        if self.structure != CorrelationStructure::Independence
            && !(self.rho > lo && self.rho < hi)
        {
            return Err(Error::Parameter(format!(
                "correlation {} outside the positive-definite range ({lo:.6}, {hi}) for cluster size {max_m}",
                self.rho
            )));
        }
        if max_m > 1 {
            let idx: Vec<i64> = (0..max_m as i64).collect();
            let v = self.build_v(max_m, &idx)?;
            if v.clone().cholesky().is_none() {
                let min_eig = smallest_eigenvalue(&v);
                return Err(Error::NearSingular { pivot: min_eig });
            }
        }
        Ok(())
    }

    /// Build the `m x m` working covariance for one cluster.
    pub fn build_v(&self, m: usize, obs_index: &[i64]) -> Result<DMatrix<f64>> {
        if m == 0 {
            return Err(Error::Parameter("cluster size must be at least 1".into()));
        }
        let (lo, hi) = self.structure.valid_rho_range(m);
        match self.structure {
            CorrelationStructure::Independence => {
                Ok(DMatrix::identity(m, m) * self.sigma2)
            }
            CorrelationStructure::Exchangeable => {
                if m > 1 && !(self.rho > lo && self.rho < hi) {
                    return Err(Error::Parameter(format!(
                        "exchangeable correlation {} outside ({lo:.6}, {hi}) for cluster size {m}",
                        self.rho
                    )));
                }
                Ok(DMatrix::from_fn(m, m, |i, j| {
                    if i == j {
                        self.sigma2
                    } else {
                        self.sigma2 * self.rho
                    }
                }))
            }
            CorrelationStructure::Ar1 => {
                if m > 1 && !(self.rho > lo && self.rho < hi) {
                    return Err(Error::Parameter(format!(
                        "autoregressive correlation {} outside ({lo}, {hi})",
                        self.rho
                    )));
                }
                if obs_index.len() != m {
                    return Err(Error::Shape(
                        "observation index length does not match cluster size".into(),
                    ));
                }
                Ok(DMatrix::from_fn(m, m, |i, j| {
                    let lag = (obs_index[i] - obs_index[j]).unsigned_abs() as i32;
                    self.sigma2 * self.rho.powi(lag)
                }))
            }
        }
    }

    /// Inverse working covariance; closed forms for independence and
    /// exchangeable, a symmetric factorization otherwise.
    pub fn build_v_inverse(&self, m: usize, obs_index: &[i64]) -> Result<DMatrix<f64>> {
        match self.structure {
            CorrelationStructure::Independence => {
                Ok(DMatrix::identity(m, m) / self.sigma2)
            }
            CorrelationStructure::Exchangeable => {
                if m == 1 {
                    return Ok(DMatrix::from_element(1, 1, 1.0 / self.sigma2));
                }
                let (lo, hi) = self.structure.valid_rho_range(m);
                if !(self.rho > lo && self.rho < hi) {
                    return Err(Error::Parameter(format!(
                        "exchangeable correlation {} outside ({lo:.6}, {hi}) for cluster size {m}",
                        self.rho
                    )));
                }
                // Sherman-Morrison: ((1-rho)I + rho J)^-1
                let r = self.rho;
                let diag = 1.0 / (1.0 - r);
                let off = -r / ((1.0 - r) * (1.0 - r + m as f64 * r));
                Ok(DMatrix::from_fn(m, m, |i, j| {
                    let corr_inv = if i == j { diag + off } else { off };
                    corr_inv / self.sigma2
                }))
            }
            CorrelationStructure::Ar1 => {
                let v = self.build_v(m, obs_index)?;
                invert_spd(&v)
            }
        }
    }
}

/// Invert a symmetric positive definite matrix via Cholesky, reporting the
/// smallest eigenvalue if the factorization fails.
pub fn invert_spd(v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match v.clone().cholesky() {
        Some(chol) => Ok(chol.inverse()),
        None => Err(Error::NearSingular { pivot: smallest_eigenvalue(v) }),
    }
}

fn smallest_eigenvalue(v: &DMatrix<f64>) -> f64 {
    v.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Method-of-moments estimate of `(rho, sigma2)` from raw fit residuals.
///
/// The dispersion uses the degrees-of-freedom correction `N - p` where `p`
/// counts all mean parameters. The correlation is a ratio of raw second
/// moments (within-cluster cross products over all squares), so perfectly
/// duplicated pairs give exactly 1 before clipping into the positive-definite
/// range.
pub fn estimate_moments(
    residuals: &[DVector<f64>],
    obs_index: &[Vec<i64>],
    structure: CorrelationStructure,
    n_params: usize,
) -> Result<(f64, f64)> {
    let n_obs: usize = residuals.iter().map(|r| r.len()).sum();
    if n_obs == 0 {
        return Err(Error::EmptyDataset("no residuals".into()));
    }
    let ss: f64 = residuals.iter().map(|r| r.dot(r)).sum();
    let dof = n_obs.saturating_sub(n_params).max(1);
    let sigma2 = ss / dof as f64;
    let mean_sq = ss / n_obs as f64;

    if structure == CorrelationStructure::Independence {
        return Ok((0.0, sigma2));
    }

    let max_m = residuals.iter().map(|r| r.len()).max().unwrap_or(0);
    if max_m < 2 {
        return Err(Error::CannotEstimateCorrelation(
            "no cluster has two or more observations".into(),
        ));
    }
    if mean_sq == 0.0 {
        return Ok((0.0, sigma2));
    }

    let mut cross = 0.0;
    let mut pairs = 0usize;
    for (r, idx) in residuals.iter().zip(obs_index) {
        let m = r.len();
        for j in 0..m {
            for l in (j + 1)..m {
                match structure {
                    CorrelationStructure::Exchangeable => {
                        cross += r[j] * r[l];
                        pairs += 1;
                    }
                    CorrelationStructure::Ar1 => {
                        if (idx[j] - idx[l]).abs() == 1 {
                            cross += r[j] * r[l];
                            pairs += 1;
                        }
                    }
                    CorrelationStructure::Independence => unreachable!(),
                }
            }
        }
    }
    if pairs == 0 {
        return Err(Error::CannotEstimateCorrelation(
            "no residual pairs available for the requested structure".into(),
        ));
    }
    let raw = (cross / pairs as f64) / mean_sq;
    let (lo, hi) = structure.valid_rho_range(max_m);
    let rho = raw.clamp(lo + RHO_CLIP_MARGIN, hi - RHO_CLIP_MARGIN);
    Ok((rho, sigma2))
}
