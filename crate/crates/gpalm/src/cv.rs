//! Interior-knot selection by K-fold delete-cluster-out cross-validation.
//!
//! Folds partition clusters, never observations. For each candidate knot
//! count the basis (knot locations and centering offsets) is rebuilt from
//! the training clusters only; held-out responses are scored by squared
//! prediction error on the response scale, with held-out covariates clamped
//! to the training range.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::basis::{AdditiveSplineBasis, KnotRule};
use crate::covariance::{CorrelationStructure, WorkingCovariance};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{fit_gee, FitConfig, Link};

/// Largest number of knot-count combinations a per-dimension grid may span.
const MAX_GRID_COMBINATIONS: usize = 200;

/// Candidate interior-knot counts.
#[derive(Debug, Clone)]
pub enum KnotGrid {
    /// One count shared by every dimension.
    Shared(Vec<usize>),
    /// A per-dimension grid; candidates are the Cartesian product, capped at
    /// [`MAX_GRID_COMBINATIONS`].
    PerDim(Vec<Vec<usize>>),
}

impl KnotGrid {
    /// Expand into explicit per-dimension candidates, ordered so that ties
    /// break toward fewer knots.
    pub fn candidates(&self, n_dims: usize) -> Result<Vec<Vec<usize>>> {
        let mut out = match self {
            KnotGrid::Shared(counts) => {
                let mut sorted = counts.clone();
                sorted.sort_unstable();
                sorted.dedup();
                sorted.into_iter().map(|c| vec![c; n_dims]).collect::<Vec<_>>()
            }
            KnotGrid::PerDim(grids) => {
                if grids.len() != n_dims {
                    return Err(Error::Selection(format!(
                        "{} knot grids for {} dimensions",
                        grids.len(),
                        n_dims
                    )));
                }
                let total: usize = grids.iter().map(|g| g.len().max(1)).product();
                if total > MAX_GRID_COMBINATIONS {
                    return Err(Error::Selection(format!(
                        "knot grid spans {total} combinations (cap {MAX_GRID_COMBINATIONS})"
                    )));
                }
                let mut combos: Vec<Vec<usize>> = vec![vec![]];
                for g in grids {
                    let mut next = Vec::new();
                    for c in &combos {
                        for &v in g {
                            let mut c2 = c.clone();
                            c2.push(v);
                            next.push(c2);
                        }
                    }
                    combos = next;
                }
                combos
            }
        };
        if out.is_empty() {
            return Err(Error::Selection("empty knot grid".into()));
        }
        out.sort_by_key(|c| (c.iter().sum::<usize>(), c.clone()));
        out.dedup();
        Ok(out)
    }
}

/// Cross-validation plan.
#[derive(Debug, Clone)]
pub struct CvPlan {
    pub folds: usize,
    pub grid: KnotGrid,
    /// Seed for the fold assignment.
    pub seed: u64,
}

impl Default for CvPlan {
    fn default() -> Self {
        CvPlan { folds: 5, grid: KnotGrid::Shared((0..=10).collect()), seed: 0 }
    }
}

/// Score for one grid point; `score` is `None` when every fold failed or the
/// candidate was infeasible.
#[derive(Debug, Clone)]
pub struct CvScoreRow {
    pub knots: Vec<usize>,
    pub score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub chosen: Vec<usize>,
    pub table: Vec<CvScoreRow>,
    pub warnings: Vec<String>,
}

/// Uniform random partition of clusters into folds differing in size by at
/// most one; deterministic given the seed.
pub fn assign_folds(n_clusters: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Selection("cross-validation needs at least 2 folds".into()));
    }
    if n_clusters < folds {
        return Err(Error::Selection(format!(
            "{n_clusters} clusters cannot fill {folds} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n_clusters).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut labels = vec![0usize; n_clusters];
    for (pos, &cluster) in order.iter().enumerate() {
        labels[cluster] = pos % folds;
    }
    Ok(labels)
}

/// Run the cross-validation and pick the knot counts with the smallest total
/// held-out squared error (ties toward fewer knots).
#[allow(clippy::too_many_arguments)]
pub fn cross_validate(
    dataset: &Dataset,
    link: Link,
    structure: CorrelationStructure,
    fixed_rho: Option<f64>,
    plan: &CvPlan,
    degree: usize,
    rule: KnotRule,
    config: &FitConfig,
) -> Result<CvOutcome> {
    let n_dims = dataset.d();
    if n_dims == 0 {
        return Err(Error::Selection("no nonparametric dimensions to select knots for".into()));
    }
    let candidates = plan.grid.candidates(n_dims)?;
    let labels = assign_folds(dataset.n_clusters(), plan.folds, plan.seed)?;

    // training/holdout split per fold, shared across candidates
    let splits: Vec<(Dataset, Dataset)> = (0..plan.folds)
        .map(|f| {
            let keep_train: Vec<bool> = labels.iter().map(|&l| l != f).collect();
            let keep_test: Vec<bool> = labels.iter().map(|&l| l == f).collect();
            Ok((dataset.subset(&keep_train)?, dataset.subset(&keep_test)?))
        })
        .collect::<Result<_>>()?;

    let k = dataset.k();
    let results: Vec<(Option<f64>, Vec<String>)> = candidates
        .par_iter()
        .map(|knots| {
            let mut total = 0.0;
            let mut warnings = Vec::new();
            for (fold, (train, test)) in splits.iter().enumerate() {
                let p = k + knots.iter().map(|&c| c + degree + 1).sum::<usize>();
                if p >= train.n_obs() {
                    warnings.push(format!(
                        "knots {knots:?}: {p} parameters for {} training observations in fold {fold}",
                        train.n_obs()
                    ));
                    return (None, warnings);
                }
                let fit = AdditiveSplineBasis::from_pooled(&train.pooled_t(), degree, knots, rule)
                    .and_then(|basis| {
                        let spec = match fixed_rho {
                            Some(r) => WorkingCovariance::new(structure, r, 1.0),
                            None => WorkingCovariance::new(structure, 0.0, 1.0),
                        };
                        let cfg = FitConfig { fix_rho: fixed_rho.is_some(), ..*config };
                        let basis_fit = fit_gee(train, &basis, link, &spec, &cfg)?;
                        Ok((basis, basis_fit))
                    });
                match fit {
                    Ok((basis, fit)) => {
                        for c in &test.clusters {
                            let z = match basis.assemble_design(&c.t) {
                                Ok(z) => z,
                                Err(e) => {
                                    warnings.push(format!("knots {knots:?}, fold {fold}: {e}"));
                                    return (None, warnings);
                                }
                            };
                            let eta = &c.x * &fit.beta + z * &fit.gamma;
                            for i in 0..c.len() {
                                let err = c.y[i] - link.mu(eta[i]);
                                total += err * err;
                            }
                        }
                    }
                    Err(e) => {
                        warnings.push(format!("knots {knots:?}, fold {fold}: {e}"));
                        return (None, warnings);
                    }
                }
            }
            (total.is_finite().then_some(total), warnings)
        })
        .collect();

    let mut table = Vec::with_capacity(candidates.len());
    let mut warnings = Vec::new();
    for (knots, (score, warns)) in candidates.iter().zip(results) {
        table.push(CvScoreRow { knots: knots.clone(), score });
        warnings.extend(warns);
    }

    let best = table
        .iter()
        .filter_map(|row| row.score)
        .min_by(|a, b| a.partial_cmp(b).unwrap())
        .ok_or_else(|| Error::Selection("every knot-grid point failed to fit".into()))?;
    // candidates are ordered by total knot count, so the first score within
    // a hair of the minimum breaks ties toward fewer knots
    let threshold = best + 1e-9 * best.abs() + 1e-12;
    let chosen = table
        .iter()
        .find(|row| row.score.is_some_and(|s| s <= threshold))
        .map(|row| row.knots.clone())
        .unwrap();

    Ok(CvOutcome { chosen, table, warnings })
}
