//! Per-dimension B-spline bases and the stacked additive design matrix.
//!
//! Each nonparametric covariate gets its own `BsplineBasis1d`. The additive
//! design row for one observation is the concatenation over dimensions of the
//! centered basis evaluations; centering (empirical column means removed)
//! pins down the level of each additive component so the intercept can absorb
//! it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Maximum allowed ratio between adjacent knot spans.
const QUASI_UNIFORM_RATIO: f64 = 10.0;

/// How interior knots are placed when a basis is built from data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnotRule {
    /// Equally spaced empirical quantiles of the sample.
    Quantile,
    /// Equally spaced over the sample range.
    Uniform,
}

impl KnotRule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "quantile" => Ok(KnotRule::Quantile),
            "uniform" => Ok(KnotRule::Uniform),
            other => Err(Error::Parameter(format!("unknown knot rule `{other}`"))),
        }
    }
}

/// A univariate B-spline basis on `[a, b]` with clamped (open) end knots.
#[derive(Debug, Clone)]
pub struct BsplineBasis1d {
    degree: usize,
    boundary: (f64, f64),
    interior: Vec<f64>,
    /// Padded knot vector: `a` repeated `degree + 1` times, the interior
    /// knots, then `b` repeated `degree + 1` times.
    knots: Vec<f64>,
}

impl BsplineBasis1d {
    /// Build a basis from raw sample values. The boundary is the sample
    /// range; interior knots follow `rule`. Quantile knots that violate the
    /// quasi-uniform span bound are blended toward the uniform placement
    /// until the bound holds.
    pub fn from_samples(
        samples: &[f64],
        degree: usize,
        n_interior: usize,
        rule: KnotRule,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset("no sample values for knot placement".into()));
        }
        if degree < 1 {
            return Err(Error::Parameter("spline degree must be at least 1".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite sample value in knot placement".into()));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut distinct = 1usize;
        for w in sorted.windows(2) {
            if w[1] > w[0] {
                distinct += 1;
            }
        }
        if distinct < n_interior + 2 {
            return Err(Error::DegenerateSupport(format!(
                "{distinct} distinct sample values cannot support {n_interior} interior knots"
            )));
        }
        let a = sorted[0];
        let b = sorted[sorted.len() - 1];

        let uniform: Vec<f64> = (1..=n_interior)
            .map(|j| a + (b - a) * j as f64 / (n_interior + 1) as f64)
            .collect();
        let interior = match rule {
            KnotRule::Uniform => uniform,
            KnotRule::Quantile => {
                let raw: Vec<f64> = (1..=n_interior)
                    .map(|j| sample_quantile(&sorted, j as f64 / (n_interior + 1) as f64))
                    .collect();
                blend_to_quasi_uniform(&raw, &uniform, a, b)
            }
        };
        Self::new(degree, (a, b), interior)
    }

    /// Build a basis from explicit boundary and interior knots.
    pub fn new(degree: usize, boundary: (f64, f64), interior: Vec<f64>) -> Result<Self> {
        let (a, b) = boundary;
        if a.partial_cmp(&b) != Some(std::cmp::Ordering::Less) {
            return Err(Error::DegenerateSupport(format!(
                "boundary interval [{a}, {b}] has zero or negative length"
            )));
        }
        if interior.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Parameter("interior knots must be nondecreasing".into()));
        }
        if interior.iter().any(|&k| k <= a || k >= b) {
            return Err(Error::Parameter(
                "interior knots must lie strictly inside the boundary interval".into(),
            ));
        }
        check_quasi_uniform(&interior, a, b)?;

        let mut knots = Vec::with_capacity(interior.len() + 2 * (degree + 1));
        knots.extend(std::iter::repeat_n(a, degree + 1));
        knots.extend_from_slice(&interior);
        knots.extend(std::iter::repeat_n(b, degree + 1));
        Ok(BsplineBasis1d { degree, boundary, interior, knots })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn boundary(&self) -> (f64, f64) {
        self.boundary
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior
    }

    /// Number of basis functions.
    pub fn dim(&self) -> usize {
        self.interior.len() + self.degree + 1
    }

    /// Evaluate all basis functions at `t`, clamping `t` to the boundary
    /// interval. Values are nonnegative and sum to one.
    pub fn eval(&self, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.eval_into(t, out.as_mut_slice());
        out
    }

    fn eval_into(&self, t: f64, out: &mut [f64]) {
        let (a, b) = self.boundary;
        let t = t.clamp(a, b);
        let q = self.dim();
        let p = self.degree;

        // Knot span index: largest s in [p, q-1] with knots[s] <= t.
        let span = if t >= b {
            q - 1
        } else {
            let mut lo = p;
            let mut hi = q - 1;
            while lo < hi {
                let mid = (lo + hi).div_ceil(2);
                if self.knots[mid] <= t {
                    lo = mid;
                } else {
                    hi = mid - 1;
                }
            }
            lo
        };

        // Triangular Cox-de Boor scheme over the p + 1 nonzero functions.
        let mut vals = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        vals[0] = 1.0;
        for j in 1..=p {
            left[j] = t - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            vals[j] = saved;
        }

        for v in out.iter_mut() {
            *v = 0.0;
        }
        for (r, &v) in vals.iter().enumerate() {
            out[span - p + r] = v;
        }
    }
}

/// Linear-interpolation sample quantile on sorted data.
fn sample_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let w = h - lo as f64;
    sorted[lo] + w * (sorted[hi] - sorted[lo])
}

fn span_ratio(interior: &[f64], a: f64, b: f64) -> f64 {
    let mut knots = Vec::with_capacity(interior.len() + 2);
    knots.push(a);
    knots.extend_from_slice(interior);
    knots.push(b);
    let mut min = f64::INFINITY;
    let mut max = 0.0f64;
    for w in knots.windows(2) {
        let h = w[1] - w[0];
        min = min.min(h);
        max = max.max(h);
    }
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn check_quasi_uniform(interior: &[f64], a: f64, b: f64) -> Result<()> {
    let ratio = span_ratio(interior, a, b);
    if ratio > QUASI_UNIFORM_RATIO {
        return Err(Error::Parameter(format!(
            "knot sequence violates the quasi-uniform bound (span ratio {ratio:.2} > {QUASI_UNIFORM_RATIO})"
        )));
    }
    Ok(())
}

/// Move quantile knots toward the uniform placement just enough to satisfy
/// the quasi-uniform bound. Tied quantiles are resolved the same way.
fn blend_to_quasi_uniform(raw: &[f64], uniform: &[f64], a: f64, b: f64) -> Vec<f64> {
    for step in 0..=20 {
        let lambda = step as f64 / 20.0;
        let blended: Vec<f64> = raw
            .iter()
            .zip(uniform)
            .map(|(&q, &u)| (1.0 - lambda) * q + lambda * u)
            .collect();
        if span_ratio(&blended, a, b) <= QUASI_UNIFORM_RATIO {
            return blended;
        }
    }
    uniform.to_vec()
}

/// A set of per-dimension bases plus the centering offsets that make every
/// assembled design column mean zero over the construction sample.
#[derive(Debug, Clone)]
pub struct AdditiveSplineBasis {
    bases: Vec<BsplineBasis1d>,
    offsets: Vec<DVector<f64>>,
}

impl AdditiveSplineBasis {
    /// Wrap per-dimension bases with zero centering offsets.
    pub fn new(bases: Vec<BsplineBasis1d>) -> Self {
        let offsets = bases.iter().map(|b| DVector::zeros(b.dim())).collect();
        AdditiveSplineBasis { bases, offsets }
    }

    /// Build one basis per column of `pooled_t` and center on the same
    /// sample. `n_interior` gives the interior knot count per dimension.
    pub fn from_pooled(
        pooled_t: &DMatrix<f64>,
        degree: usize,
        n_interior: &[usize],
        rule: KnotRule,
    ) -> Result<Self> {
        if n_interior.len() != pooled_t.ncols() {
            return Err(Error::Shape(format!(
                "{} knot counts for {} nonparametric dimensions",
                n_interior.len(),
                pooled_t.ncols()
            )));
        }
        let mut bases = Vec::with_capacity(pooled_t.ncols());
        for (d, &k) in n_interior.iter().enumerate() {
            let col: Vec<f64> = pooled_t.column(d).iter().copied().collect();
            bases.push(BsplineBasis1d::from_samples(&col, degree, k, rule)?);
        }
        AdditiveSplineBasis::new(bases).set_centering(pooled_t)
    }

    pub fn n_dims(&self) -> usize {
        self.bases.len()
    }

    pub fn total_dim(&self) -> usize {
        self.bases.iter().map(|b| b.dim()).sum()
    }

    pub fn bases(&self) -> &[BsplineBasis1d] {
        &self.bases
    }

    pub fn offsets(&self, d: usize) -> &DVector<f64> {
        &self.offsets[d]
    }

    /// Column range of dimension `d` within the assembled design.
    pub fn dim_range(&self, d: usize) -> std::ops::Range<usize> {
        let start: usize = self.bases[..d].iter().map(|b| b.dim()).sum();
        start..start + self.bases[d].dim()
    }

    /// Recompute centering offsets as the raw basis column means over
    /// `pooled_t`, which must cover all observations used for fitting.
    pub fn set_centering(mut self, pooled_t: &DMatrix<f64>) -> Result<Self> {
        if pooled_t.nrows() == 0 {
            return Err(Error::EmptyDataset("cannot center on an empty sample".into()));
        }
        if pooled_t.ncols() != self.bases.len() {
            return Err(Error::Shape(format!(
                "pooled sample has {} columns, basis has {} dimensions",
                pooled_t.ncols(),
                self.bases.len()
            )));
        }
        let n = pooled_t.nrows();
        for (d, basis) in self.bases.iter().enumerate() {
            let mut acc = DVector::zeros(basis.dim());
            for i in 0..n {
                acc += basis.eval(pooled_t[(i, d)]);
            }
            self.offsets[d] = acc / n as f64;
        }
        Ok(self)
    }

    /// Assemble the centered design matrix for one cluster's nonparametric
    /// covariates (rows are observations).
    pub fn assemble_design(&self, t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if t.ncols() != self.bases.len() {
            return Err(Error::Shape(format!(
                "covariate matrix has {} columns, basis has {} dimensions",
                t.ncols(),
                self.bases.len()
            )));
        }
        let mut z = DMatrix::zeros(t.nrows(), self.total_dim());
        let mut col0 = 0;
        for (d, basis) in self.bases.iter().enumerate() {
            let q = basis.dim();
            let mut row_buf = vec![0.0; q];
            for i in 0..t.nrows() {
                basis.eval_into(t[(i, d)], &mut row_buf);
                for j in 0..q {
                    z[(i, col0 + j)] = row_buf[j] - self.offsets[d][j];
                }
            }
            col0 += q;
        }
        Ok(z)
    }

    /// Evaluate the fitted additive component for dimension `d` on a grid,
    /// using the slice of `gamma` belonging to that dimension.
    pub fn eval_component(&self, gamma: &DVector<f64>, d: usize, grid: &[f64]) -> Result<Vec<f64>> {
        if d >= self.bases.len() {
            return Err(Error::IndexOutOfRange(format!(
                "component {d} of a {}-dimensional basis",
                self.bases.len()
            )));
        }
        if gamma.len() != self.total_dim() {
            return Err(Error::Shape(format!(
                "coefficient vector length {} does not match basis dimension {}",
                gamma.len(),
                self.total_dim()
            )));
        }
        let range = self.dim_range(d);
        let gd = gamma.rows(range.start, range.len());
        let basis = &self.bases[d];
        let mut buf = vec![0.0; basis.dim()];
        Ok(grid
            .iter()
            .map(|&t| {
                basis.eval_into(t, &mut buf);
                buf.iter()
                    .zip(self.offsets[d].iter())
                    .zip(gd.iter())
                    .map(|((b, o), g)| (b - o) * g)
                    .sum()
            })
            .collect())
    }
}
