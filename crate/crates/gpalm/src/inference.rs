//! Post-fit covariance estimation for the parametric coefficients.
//!
//! The sandwich combines the inverse Schur complement of the model-based
//! information ("bread") with an outer-product-of-residuals middle term. When
//! the working covariance is plugged in as the middle term instead, the
//! sandwich collapses to the bread itself, which is also the inverse of `n`
//! times the spline-based information estimate.

use nalgebra::{DMatrix, DVector};

use crate::basis::AdditiveSplineBasis;
use crate::covariance::WorkingCovariance;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{
    build_designs, cluster_state, v_inverses, ClusterDesign, FitConfig, FitResult, InfoBlocks,
    Link,
};
use crate::solve::{solve_spd, sum_zero_contrast, symmetrize, SolveFlags};

/// What stands in for the true per-cluster covariance in the middle of the
/// sandwich.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeatKind {
    /// Plug-in outer product of response-scale residuals.
    ResidualOuter,
    /// The working covariance itself; the sandwich then equals the bread
    /// (the correct-specification identity).
    WorkingV,
}

pub(crate) struct InferencePieces {
    pub info: InfoBlocks,
    /// Schur complement `xx - xz zz^- zx` of the information blocks.
    pub schur: DMatrix<f64>,
    /// Inverse Schur complement.
    pub bread: DMatrix<f64>,
    pub robust_cov: DMatrix<f64>,
    pub ridge_used: bool,
}

/// Core computation shared by the fit path and the public reporting surface.
/// `dims` is the per-dimension spline block layout inside the stacked
/// coefficient vector; each block carries one exact sum redundancy, so the
/// spline information block is inverted through a sum-to-zero contrast.
#[allow(clippy::too_many_arguments)]
pub(crate) fn compute_pieces(
    designs: &[ClusterDesign],
    v_invs: &[DMatrix<f64>],
    dims: &[usize],
    spec: &WorkingCovariance,
    link: Link,
    eta_clamp: f64,
    theta: &DVector<f64>,
    meat_kind: MeatKind,
) -> Result<InferencePieces> {
    let k = designs[0].k;
    let q = designs[0].u.ncols() - k;
    debug_assert_eq!(q, dims.iter().sum::<usize>());
    let mut flags = SolveFlags::default();

    struct Weighted {
        dx: DMatrix<f64>,
        dz: DMatrix<f64>,
        resid: DVector<f64>,
    }

    let mut xx = DMatrix::zeros(k, k);
    let mut xz = DMatrix::zeros(k, q);
    let mut zz = DMatrix::zeros(q, q);
    let mut per_cluster = Vec::with_capacity(designs.len());
    for (design, w) in designs.iter().zip(v_invs) {
        let st = cluster_state(design, link, eta_clamp, theta);
        let m = design.m();
        let mut dx = design.x();
        let mut dz = design.z();
        if link != Link::Identity {
            for j in 0..m {
                dx.row_mut(j).scale_mut(st.dmu[j]);
                dz.row_mut(j).scale_mut(st.dmu[j]);
            }
        }
        xx += dx.transpose() * w * &dx;
        if q > 0 {
            xz += dx.transpose() * w * &dz;
            zz += dz.transpose() * w * &dz;
        }
        per_cluster.push(Weighted { dx, dz, resid: st.resid });
    }

    // coefficient map C with zz * C = zx, through the per-block contrast
    let c_map = if q > 0 {
        let contrast = block_contrast(dims);
        let zz_red = contrast.transpose() * &zz * &contrast;
        let zx_red = contrast.transpose() * xz.transpose();
        let sol = solve_spd(&zz_red, &zx_red, &mut flags).map_err(|e| match e {
            Error::SingularDesign { nullity } => Error::Inference(format!(
                "spline information block is rank deficient (extra null space dimension \
                 {nullity}); consider fewer knots"
            )),
            other => other,
        })?;
        &contrast * sol
    } else {
        DMatrix::zeros(0, k)
    };

    // adjusted designs, bread, and the requested middle term
    let mut schur = DMatrix::zeros(k, k);
    let mut meat = DMatrix::zeros(k, k);
    for ((cluster, w), design) in per_cluster.iter().zip(v_invs).zip(designs) {
        let dxt = if q > 0 { &cluster.dx - &cluster.dz * &c_map } else { cluster.dx.clone() };
        let wdxt = w * &dxt;
        schur += dxt.transpose() * &wdxt;
        match meat_kind {
            MeatKind::ResidualOuter => {
                let v = wdxt.transpose() * &cluster.resid;
                meat += &v * v.transpose();
            }
            MeatKind::WorkingV => {
                let v_mat = spec.build_v(design.m(), &design.obs_index)?;
                meat += wdxt.transpose() * v_mat * &wdxt;
            }
        }
    }
    schur = symmetrize(&schur);
    let identity = DMatrix::identity(k, k);
    let bread = solve_spd(&schur, &identity, &mut flags).map_err(|e| match e {
        Error::SingularDesign { nullity } => Error::Inference(format!(
            "adjusted parametric information is rank deficient (null space dimension {nullity})"
        )),
        other => other,
    })?;
    let bread = symmetrize(&bread);
    let robust_cov = symmetrize(&(&bread * meat * &bread));

    Ok(InferencePieces {
        info: InfoBlocks { xx, xz, zz },
        schur,
        bread,
        robust_cov,
        ridge_used: flags.ridge_used,
    })
}

/// Block-diagonal sum-to-zero contrast for the stacked spline layout.
fn block_contrast(dims: &[usize]) -> DMatrix<f64> {
    let q: usize = dims.iter().sum();
    let q_red: usize = dims.iter().map(|&d| d - 1).sum();
    let mut c = DMatrix::zeros(q, q_red);
    let mut row = 0;
    let mut col = 0;
    for &d in dims {
        c.view_mut((row, col), (d, d - 1)).copy_from(&sum_zero_contrast(d));
        row += d;
        col += d - 1;
    }
    c
}

/// Sandwich covariance of the parametric coefficients, with standard errors
/// and the model-based covariance.
#[derive(Debug, Clone)]
pub struct SandwichReport {
    /// The sandwich covariance matrix.
    pub robust_cov: DMatrix<f64>,
    pub se: DVector<f64>,
    /// Inverse of `n` times the spline-based information estimate; equal to
    /// the sandwich bread.
    pub model_cov: Option<DMatrix<f64>>,
    pub z_scores: Option<DVector<f64>>,
}

fn pieces_for(
    dataset: &Dataset,
    basis: &AdditiveSplineBasis,
    link: Link,
    spec: &WorkingCovariance,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
    meat: MeatKind,
) -> Result<InferencePieces> {
    let designs = build_designs(dataset, basis)?;
    let v_invs = v_inverses(&designs, spec)?;
    let dims: Vec<usize> = basis.bases().iter().map(|b| b.dim()).collect();
    let mut theta = DVector::zeros(beta.len() + gamma.len());
    theta.rows_mut(0, beta.len()).copy_from(beta);
    theta.rows_mut(beta.len(), gamma.len()).copy_from(gamma);
    compute_pieces(
        &designs,
        &v_invs,
        &dims,
        spec,
        link,
        FitConfig::default().eta_clamp,
        &theta,
        meat,
    )
}

/// Recompute the sandwich report at a converged fit.
pub fn sandwich(
    dataset: &Dataset,
    basis: &AdditiveSplineBasis,
    link: Link,
    spec: &WorkingCovariance,
    fit: &FitResult,
) -> Result<SandwichReport> {
    sandwich_with_meat(dataset, basis, link, spec, &fit.beta, &fit.gamma, MeatKind::ResidualOuter)
}

/// Sandwich report with an explicit choice of the middle term; plugging the
/// working covariance in reproduces the bread exactly.
pub fn sandwich_with_meat(
    dataset: &Dataset,
    basis: &AdditiveSplineBasis,
    link: Link,
    spec: &WorkingCovariance,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
    meat: MeatKind,
) -> Result<SandwichReport> {
    let pieces = pieces_for(dataset, basis, link, spec, beta, gamma, meat)?;
    let k = beta.len();
    let se = DVector::from_fn(k, |i, _| pieces.robust_cov[(i, i)].max(0.0).sqrt());
    let z = DVector::from_fn(k, |i, _| {
        if se[i] > 0.0 {
            beta[i] / se[i]
        } else {
            f64::NAN
        }
    });
    Ok(SandwichReport {
        robust_cov: pieces.robust_cov,
        se,
        model_cov: Some(pieces.bread),
        z_scores: Some(z),
    })
}

/// Spline-based estimate of the information matrix for the parametric
/// coefficients, `(xx - xz zz^- zx) / n`, with the working covariance of the
/// fit standing in for the truth.
pub fn info_matrix(
    dataset: &Dataset,
    basis: &AdditiveSplineBasis,
    link: Link,
    spec: &WorkingCovariance,
    fit: &FitResult,
) -> Result<DMatrix<f64>> {
    let pieces = pieces_for(
        dataset,
        basis,
        link,
        spec,
        &fit.beta,
        &fit.gamma,
        MeatKind::ResidualOuter,
    )?;
    Ok(pieces.schur / dataset.n_clusters() as f64)
}

/// One row of the coefficient table.
#[derive(Debug, Clone)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    /// `estimate / se`; NaN when the standard error is zero.
    pub z: f64,
}

/// Per-coefficient estimate, standard error and z statistic from a
/// covariance matrix.
pub fn wald_report(
    names: &[String],
    beta: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Vec<CoefficientRow> {
    (0..beta.len())
        .map(|i| {
            let se = cov[(i, i)].max(0.0).sqrt();
            let z = if se > 0.0 { beta[i] / se } else { f64::NAN };
            CoefficientRow { name: names.get(i).cloned().unwrap_or_else(|| format!("b{i}")), estimate: beta[i], se, z }
        })
        .collect()
}
