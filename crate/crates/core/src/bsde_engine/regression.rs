//! Ridge least-squares estimator of conditional expectations on polynomial
//! features of the path prefix.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::path_space::PathView;

/// Rows per partial sum; fixed so reductions do not depend on the thread count.
const CHUNK_ROWS: usize = 1024;

/// Relative eigenvalue floor below which an unpenalized design counts as singular.
const RANK_TOL: f64 = 1e-12;

/// Default ridge on the standardized scale, where every feature has unit variance.
pub const DEFAULT_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegressionError {
    #[error("{rows} rows is below the minimum of {min} per regression")]
    TooFewPaths { rows: usize, min: usize },
    #[error("design is rank deficient (eigenvalue ratio {ratio:e}); use a positive ridge")]
    RankDeficient { ratio: f64 },
    #[error("non-finite entry in regression input")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("normal equations could not be factorized")]
    Factorization,
}

/// Regression basis over the path prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Basis {
    /// Monomials in the current state.
    MarkovPoly { degree: usize },
    /// Monomials in the current state, the running integral `∫₀ᵗ x ds` and `n_lags` lagged states.
    PathFeatures { degree: usize, n_lags: usize },
}

impl Basis {
    pub fn degree(&self) -> usize {
        match *self {
            Basis::MarkovPoly { degree } | Basis::PathFeatures { degree, .. } => degree,
        }
    }

    pub fn uses_integral(&self) -> bool {
        matches!(self, Basis::PathFeatures { .. })
    }

    /// Number of scalar variables the monomials are built from.
    pub fn n_vars(&self, d: usize) -> usize {
        match *self {
            Basis::MarkovPoly { .. } => d,
            Basis::PathFeatures { n_lags, .. } => d * (2 + n_lags),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    /// `None` picks the default for the problem.
    pub basis: Option<Basis>,
    /// Ridge on standardized features; `None` uses [`DEFAULT_RIDGE`].
    pub ridge_lambda: Option<f64>,
    pub min_paths_per_regression: usize,
    /// Iterate the driver implicitly in `Y` (at most 5 sweeps, tolerance 1e-10).
    pub implicit_driver: bool,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self { basis: None, ridge_lambda: None, min_paths_per_regression: 16, implicit_driver: false }
    }
}

impl RegressionConfig {
    pub fn with_basis(basis: Basis) -> Self {
        Self { basis: Some(basis), ..Self::default() }
    }

    /// The configured basis, or the default for (non-)path-dependent problems.
    pub fn resolve_basis(&self, path_dependent: bool) -> Basis {
        self.basis.unwrap_or(if path_dependent {
            Basis::PathFeatures { degree: 2, n_lags: 0 }
        } else {
            Basis::MarkovPoly { degree: 2 }
        })
    }

    fn ridge(&self) -> f64 {
        self.ridge_lambda.unwrap_or(DEFAULT_RIDGE)
    }
}

/// Evaluates the monomials of a basis. Each monomial beyond the constant is a
/// parent monomial times one variable, so a row costs one multiply per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    basis: Basis,
    d: usize,
    n_vars: usize,
    /// `(parent, variable)` for features `1..`; feature 0 is the constant.
    recipe: Vec<(usize, usize)>,
}

impl FeatureMap {
    pub fn new(basis: Basis, d: usize) -> Self {
        let n_vars = basis.n_vars(d);
        let mut recipe = Vec::new();
        // (index, largest variable used) of the previous degree's monomials.
        let mut frontier = vec![(0usize, 0usize)];
        for _ in 0..basis.degree() {
            let mut next = Vec::new();
            for &(parent, max_var) in &frontier {
                for v in max_var..n_vars {
                    recipe.push((parent, v));
                    next.push((recipe.len(), v));
                }
            }
            frontier = next;
        }
        Self { basis, d, n_vars, recipe }
    }

    pub fn basis(&self) -> Basis {
        self.basis
    }

    pub fn n_features(&self) -> usize {
        self.recipe.len() + 1
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    /// Variables at the last index of `view`; `integral` is `∫₀ᵗ x ds` when the basis needs it.
    pub fn variables(&self, view: &PathView, integral: &[f64], out: &mut [f64]) {
        let d = self.d;
        out[..d].copy_from_slice(view.current());
        if let Basis::PathFeatures { n_lags, .. } = self.basis {
            out[d..2 * d].copy_from_slice(&integral[..d]);
            let k = view.last_index();
            for lag in 1..=n_lags {
                let off = (1 + lag) * d;
                out[off..off + d].copy_from_slice(view.state(k.saturating_sub(lag)));
            }
        }
    }

    pub fn expand(&self, vars: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        for (i, &(parent, v)) in self.recipe.iter().enumerate() {
            out[i + 1] = out[parent] * vars[v];
        }
    }

    /// Features of a single prefix, computing the running integral when needed.
    pub fn features(&self, view: &PathView, out: &mut [f64]) {
        SCRATCH.with(|s| {
            let mut s = s.borrow_mut();
            s.clear();
            s.resize(self.d + self.n_vars, 0.0);
            let (integral, vars) = s.split_at_mut(self.d);
            if self.basis.uses_integral() {
                view.running_integral(integral);
            }
            self.variables(view, integral, vars);
            self.expand(vars, out);
        });
    }

    /// Runs `f` on the features of `view`, held in per-thread scratch space.
    pub fn with_features<R>(&self, view: &PathView, f: impl FnOnce(&[f64]) -> R) -> R {
        FEATURES.with(|buf| {
            let mut buf = buf.borrow_mut();
            buf.clear();
            buf.resize(self.n_features(), 0.0);
            self.features(view, &mut buf);
            f(&buf)
        })
    }
}

thread_local! {
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
    static FEATURES: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, RegressionError> {
        if data.len() != rows * cols {
            return Err(RegressionError::Shape(format!("{} entries for {rows}×{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Fitted linear predictor in raw feature coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEstimator {
    pub basis: Basis,
    pub n_features: usize,
    pub n_targets: usize,
    pub intercept: Vec<f64>,
    /// `n_targets × n_features`, row-major; dropped columns hold zeros.
    pub coef: Vec<f64>,
}

impl LinearEstimator {
    pub fn predict(&self, features: &[f64], out: &mut [f64]) {
        for (q, o) in out.iter_mut().enumerate().take(self.n_targets) {
            let row = &self.coef[q * self.n_features..(q + 1) * self.n_features];
            *o = self.intercept[q] + row.iter().zip(features).map(|(c, f)| c * f).sum::<f64>();
        }
    }

    /// Predictions for every row, `rows × n_targets`.
    pub fn predict_all(&self, features: &FeatureMatrix) -> Vec<f64> {
        let q = self.n_targets;
        let mut out = vec![0.0; features.rows * q];
        out.par_chunks_mut(CHUNK_ROWS * q).enumerate().for_each(|(c, chunk)| {
            for (r, o) in chunk.chunks_mut(q).enumerate() {
                self.predict(features.row(c * CHUNK_ROWS + r), o);
            }
        });
        out
    }
}

/// Factorized normal equations for one feature matrix, reusable across targets.
#[derive(Debug, Clone)]
pub struct Design {
    rows: usize,
    cols: usize,
    active: Vec<usize>,
    means: Vec<f64>,
    scales: Vec<f64>,
    /// Inverse of the (ridged) correlation matrix of the active columns.
    inverse: DMatrix<f64>,
}

pub(crate) fn chunked_sum<F>(rows: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync,
{
    let n_chunks = rows.div_ceil(CHUNK_ROWS);
    let partials: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; width];
            f(c * CHUNK_ROWS..((c + 1) * CHUNK_ROWS).min(rows), &mut acc);
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

impl Design {
    pub fn new(features: &FeatureMatrix, cfg: &RegressionConfig) -> Result<Self, RegressionError> {
        let (rows, cols) = (features.rows, features.cols);
        if rows < cfg.min_paths_per_regression.max(1) {
            return Err(RegressionError::TooFewPaths { rows, min: cfg.min_paths_per_regression.max(1) });
        }
        if features.data.iter().any(|v| !v.is_finite()) {
            return Err(RegressionError::NonFinite);
        }
        let lambda = cfg.ridge();
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(RegressionError::Shape(format!("ridge {lambda} must be finite and nonnegative")));
        }
        let nf = rows as f64;
        let sums = chunked_sum(rows, cols, |range, acc| {
            for i in range {
                for (a, v) in acc.iter_mut().zip(features.row(i)) {
                    *a += v;
                }
            }
        });
        let means: Vec<f64> = sums.iter().map(|s| s / nf).collect();
        let second = chunked_sum(rows, cols * cols, |range, acc| {
            let mut centered = vec![0.0; cols];
            for i in range {
                for ((c, v), m) in centered.iter_mut().zip(features.row(i)).zip(&means) {
                    *c = v - m;
                }
                for j in 0..cols {
                    let cj = centered[j];
                    if cj == 0.0 {
                        continue;
                    }
                    for l in j..cols {
                        acc[j * cols + l] += cj * centered[l];
                    }
                }
            }
        });
        let scales: Vec<f64> = (0..cols).map(|j| (second[j * cols + j] / nf).max(0.0).sqrt()).collect();
        // Constant columns (including the intercept) carry no information beyond the mean.
        let active: Vec<usize> = (0..cols).filter(|&j| scales[j] > 1e-12 * (1.0 + means[j].abs())).collect();
        let pa = active.len();
        let mut corr = DMatrix::<f64>::zeros(pa, pa);
        for (a, &j) in active.iter().enumerate() {
            for (b, &l) in active.iter().enumerate().skip(a) {
                let v = second[j * cols + l] / (nf * scales[j] * scales[l]);
                corr[(a, b)] = v;
                corr[(b, a)] = v;
            }
        }
        let inverse = if pa == 0 {
            corr
        } else {
            let eig = SymmetricEigen::new(corr.clone());
            let max = eig.eigenvalues.max().max(0.0);
            let min = eig.eigenvalues.min();
            let ratio = if max > 0.0 { min / max } else { 0.0 };
            if lambda == 0.0 && ratio <= RANK_TOL {
                return Err(RegressionError::RankDeficient { ratio });
            }
            let mut ridged = corr;
            for a in 0..pa {
                ridged[(a, a)] += lambda;
            }
            ridged.cholesky().ok_or(RegressionError::Factorization)?.inverse()
        };
        Ok(Self { rows, cols, active, means, scales, inverse })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Fits `targets` (`rows × n_targets`, row-major).
    pub fn fit(&self, features: &FeatureMatrix, targets: &[f64], n_targets: usize, basis: Basis) -> Result<LinearEstimator, RegressionError> {
        if features.rows != self.rows || features.cols != self.cols || targets.len() != self.rows * n_targets {
            return Err(RegressionError::Shape("targets do not match the design".into()));
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(RegressionError::NonFinite);
        }
        let pa = self.active.len();
        let q = n_targets;
        let nf = self.rows as f64;
        // Layout: [target sums (q) | cross moments (pa × q)].
        let acc = chunked_sum(self.rows, q + pa * q, |range, acc| {
            for i in range {
                let row = features.row(i);
                let t = &targets[i * q..(i + 1) * q];
                for (a, v) in acc[..q].iter_mut().zip(t) {
                    *a += v;
                }
                for (a, &j) in self.active.iter().enumerate() {
                    let c = row[j] - self.means[j];
                    if c == 0.0 {
                        continue;
                    }
                    for (s, v) in acc[q + a * q..q + (a + 1) * q].iter_mut().zip(t) {
                        *s += c * v;
                    }
                }
            }
        });
        let target_means: Vec<f64> = acc[..q].iter().map(|s| s / nf).collect();
        let mut coef = vec![0.0; q * self.cols];
        let mut intercept = target_means.clone();
        for k in 0..q {
            let rhs = DVector::from_iterator(pa, (0..pa).map(|a| acc[q + a * q + k] / (nf * self.scales[self.active[a]])));
            let beta = &self.inverse * rhs;
            for (a, &j) in self.active.iter().enumerate() {
                let c = beta[a] / self.scales[j];
                coef[k * self.cols + j] = c;
                intercept[k] -= c * self.means[j];
            }
        }
        Ok(LinearEstimator { basis, n_features: self.cols, n_targets: q, intercept, coef })
    }
}

/// One-shot ridge regression of `targets` on `features`.
pub fn condexp_regress(
    features: &FeatureMatrix,
    targets: &[f64],
    n_targets: usize,
    basis: Basis,
    cfg: &RegressionConfig,
) -> Result<LinearEstimator, RegressionError> {
    Design::new(features, cfg)?.fit(features, targets, n_targets, basis)
}
