//! Backward induction for the BSDE given a simulated forward ensemble, with
//! conditional expectations estimated by regression on prefix features.

pub mod regression;

use rayon::prelude::*;
use thiserror::Error;

pub use regression::{
    condexp_regress, Basis, Design, FeatureMap, FeatureMatrix, LinearEstimator, RegressionConfig, RegressionError,
};

use crate::path_space::PathEnsemble;
use crate::problem::FBSDEProblem;
use crate::sde_engine::BrownianBatch;
use regression::chunked_sum;

const IMPLICIT_SWEEPS: usize = 5;
const IMPLICIT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BsdeError {
    #[error("regression failed at grid index {step}: {source}")]
    Regression { step: usize, source: RegressionError },
    #[error("non-finite backward value at grid index {0}")]
    NonFinite(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Per-path `Y` (`m+1` points) and `Z` (`m` steps) over one interval, plus the
/// fitted estimators at every step. Values are stored step by step, so each
/// regression reads and writes one contiguous block.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardSolution {
    n_paths: usize,
    n_steps: usize,
    n: usize,
    /// Global grid index of the interval's first point.
    k_a: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    /// Estimator of `Y` at `k_a + j`, for `j < m`.
    pub y_estimators: Vec<LinearEstimator>,
    /// Estimator of `Z` at `k_a + j`, for `j < m`.
    pub z_estimators: Vec<LinearEstimator>,
}

impl BackwardSolution {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn first_index(&self) -> usize {
        self.k_a
    }

    /// `Y` of path `p` at local index `j ∈ 0..=m`.
    pub fn y(&self, p: usize, j: usize) -> &[f64] {
        let off = (j * self.n_paths + p) * self.n;
        &self.y[off..off + self.n]
    }

    /// `Z` (`n×n`, row-major) of path `p` at local step `j ∈ 0..m`.
    pub fn z(&self, p: usize, j: usize) -> &[f64] {
        let nn = self.n * self.n;
        let off = (j * self.n_paths + p) * nn;
        &self.z[off..off + nn]
    }

    /// All `Y` values, step-major: `[j][path][i]`.
    pub fn y_data(&self) -> &[f64] {
        &self.y
    }

    /// All `Z` values, step-major: `[j][path][row·n + col]`.
    pub fn z_data(&self) -> &[f64] {
        &self.z
    }

    /// Sample mean of `Y` at local index `j`.
    pub fn y_mean(&self, j: usize) -> Vec<f64> {
        let n = self.n;
        let block = &self.y[j * self.n_paths * n..(j + 1) * self.n_paths * n];
        chunked_sum(self.n_paths, n, |range, acc| {
            for p in range {
                for (a, v) in acc.iter_mut().zip(&block[p * n..(p + 1) * n]) {
                    *a += v;
                }
            }
        })
        .into_iter()
        .map(|v| v / self.n_paths as f64)
        .collect()
    }

    /// Empirical `sup_j E[|ΔY_j|² + Σ_{i≥j}|ΔZ_i|² dt]` between two solutions on the same interval.
    pub fn distance_sq(&self, other: &BackwardSolution, dt: f64) -> f64 {
        let (m, np) = (self.n_steps, self.n_paths);
        let nf = np as f64;
        let mean_sq = |a: &[f64], b: &[f64], width: usize| -> f64 {
            chunked_sum(np, 1, |range, acc| {
                let r = range.start * width..range.end * width;
                acc[0] += sq_diff(&a[r.clone()], &b[r]);
            })[0]
                / nf
        };
        let (ny, nz) = (self.n, self.n * self.n);
        let mut best: f64 = 0.0;
        let mut tail = 0.0;
        for j in (0..=m).rev() {
            if j < m {
                let r = j * np * nz..(j + 1) * np * nz;
                tail += mean_sq(&self.z[r.clone()], &other.z[r], nz) * dt;
            }
            let r = j * np * ny..(j + 1) * np * ny;
            best = best.max(mean_sq(&self.y[r.clone()], &other.y[r], ny) + tail);
        }
        best
    }

    /// Values laid out as in [`Self::y_data`] and [`Self::z_data`], without estimators.
    pub(crate) fn from_values(n_paths: usize, n_steps: usize, n: usize, k_a: usize, y: Vec<f64>, z: Vec<f64>) -> Self {
        debug_assert_eq!(y.len(), n_paths * (n_steps + 1) * n);
        debug_assert_eq!(z.len(), n_paths * n_steps * n * n);
        Self { n_paths, n_steps, n, k_a, y, z, y_estimators: Vec::new(), z_estimators: Vec::new() }
    }

    /// The all-zero candidate on an interval.
    pub fn zeros(n_paths: usize, n_steps: usize, n: usize, k_a: usize) -> Self {
        Self {
            n_paths,
            n_steps,
            n,
            k_a,
            y: vec![0.0; n_paths * (n_steps + 1) * n],
            z: vec![0.0; n_paths * n_steps * n * n],
            y_estimators: Vec::new(),
            z_estimators: Vec::new(),
        }
    }
}

fn sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fills the feature matrix of every path at grid index `k`.
/// Steps whose feature matrices are built together; each path is read once per window.
const FEATURE_WINDOW: usize = 8;

/// Feature matrices at grid indices `k_lo..k_lo + len`.
fn window_features(map: &FeatureMap, ens: &PathEnsemble, k_lo: usize, len: usize) -> Vec<FeatureMatrix> {
    let p = map.n_features();
    let d = ens.dim();
    let dt = ens.grid().dt();
    let rows = ens.n_paths();
    let with_integral = map.basis().uses_integral();
    let chunk_rows = 1024;
    let parts: Vec<Vec<f64>> = (0..rows.div_ceil(chunk_rows))
        .into_par_iter()
        .map(|c| {
            let range = c * chunk_rows..((c + 1) * chunk_rows).min(rows);
            let local = range.len();
            let mut buf = vec![0.0; len * local * p];
            let mut vars = vec![0.0; map.n_vars()];
            let mut integral = vec![0.0; d];
            for (r, path) in range.enumerate() {
                integral.iter_mut().for_each(|v| *v = 0.0);
                if with_integral {
                    for k in 0..k_lo {
                        for (a, x) in integral.iter_mut().zip(ens.state(path, k)) {
                            *a += x * dt;
                        }
                    }
                }
                for jj in 0..len {
                    let k = k_lo + jj;
                    map.variables(&ens.view(path, k), &integral, &mut vars);
                    map.expand(&vars, &mut buf[(jj * local + r) * p..(jj * local + r + 1) * p]);
                    if with_integral {
                        for (a, x) in integral.iter_mut().zip(ens.state(path, k)) {
                            *a += x * dt;
                        }
                    }
                }
            }
            buf
        })
        .collect();
    (0..len)
        .map(|jj| {
            let mut data = Vec::with_capacity(rows * p);
            for part in &parts {
                let local = part.len() / (len * p);
                data.extend_from_slice(&part[jj * local * p..(jj + 1) * local * p]);
            }
            FeatureMatrix { rows, cols: p, data }
        })
        .collect()
}

/// `Z = Regress[(Y_{k+1} − Ŷ) ΔWᵀ]/dt` where `Ŷ` is the regressed continuation
/// value; centering removes noise without changing the conditional expectation.
/// Returns the continuation estimator and the `Z` estimator.
fn continuation_and_z(
    design: &Design,
    fm: &FeatureMatrix,
    basis: Basis,
    y_next: &[f64],
    n: usize,
    dw: &[f64],
    dt: f64,
) -> Result<(LinearEstimator, Vec<f64>, LinearEstimator, Vec<f64>), RegressionError> {
    let cont = design.fit(fm, y_next, n, basis)?;
    let y_hat = cont.predict_all(fm);
    let nn = n * n;
    let mut z_targets = vec![0.0; fm.rows * nn];
    z_targets.par_chunks_mut(nn).enumerate().for_each(|(p, out)| {
        for i in 0..n {
            let r = y_next[p * n + i] - y_hat[p * n + i];
            for l in 0..n {
                out[i * n + l] = r * dw[p * n + l] / dt;
            }
        }
    });
    let z_est = design.fit(fm, &z_targets, nn, basis)?;
    let z_hat = z_est.predict_all(fm);
    Ok((cont, y_hat, z_est, z_hat))
}

/// Regression estimate of `Z` from next-step values and increments (`n_paths × n` each).
pub fn estimate_z(
    y_next: &[f64],
    dw: &[f64],
    n: usize,
    dt: f64,
    features: &FeatureMatrix,
    basis: Basis,
    cfg: &RegressionConfig,
) -> Result<Vec<f64>, RegressionError> {
    if y_next.len() != features.rows * n || dw.len() != features.rows * n {
        return Err(RegressionError::Shape("y_next and dW must have n entries per row".into()));
    }
    let design = Design::new(features, cfg)?;
    Ok(continuation_and_z(&design, features, basis, y_next, n, dw, dt)?.3)
}

/// Backward recursion over the interval covered by `noise`, which must end at
/// the ensemble's last index. `terminal` holds `n` values per path.
pub fn solve_backward(
    p: &FBSDEProblem,
    ens: &PathEnsemble,
    terminal: &[f64],
    noise: &BrownianBatch,
    cfg: &RegressionConfig,
) -> Result<BackwardSolution, BsdeError> {
    solve_backward_into(p, ens, terminal, noise, cfg, None)
}

/// As [`solve_backward`], writing into `storage` when its shape fits.
pub(crate) fn solve_backward_into(
    p: &FBSDEProblem,
    ens: &PathEnsemble,
    terminal: &[f64],
    noise: &BrownianBatch,
    cfg: &RegressionConfig,
    storage: Option<BackwardSolution>,
) -> Result<BackwardSolution, BsdeError> {
    let (d, n) = (p.d, p.n);
    let n_paths = ens.n_paths();
    let m = noise.grid().n_steps();
    let k_b = ens.last_index();
    if m > k_b || !ens.grid().aligned_at(k_b - m, noise.grid()) {
        return Err(BsdeError::Shape("noise grid does not end at the ensemble's last index".into()));
    }
    if noise.n_paths() != n_paths || terminal.len() != n_paths * n || ens.dim() != d || noise.dim() != n {
        return Err(BsdeError::Shape("ensemble, terminal values and noise disagree".into()));
    }
    let k_a = k_b - m;
    let dt = ens.grid().dt();
    let basis = cfg.resolve_basis(p.path_dependent);
    let map = FeatureMap::new(basis, d);
    let mut window: Vec<FeatureMatrix> = Vec::new();

    // Every entry is overwritten below, so recycled storage needs no clearing.
    let mut sol = match storage {
        Some(mut s) if (s.n_paths, s.n_steps, s.n) == (n_paths, m, n) => {
            s.k_a = k_a;
            s.y_estimators.clear();
            s.z_estimators.clear();
            s
        }
        _ => BackwardSolution::zeros(n_paths, m, n, k_a),
    };
    sol.y[m * n_paths * n..].copy_from_slice(terminal);
    let mut y_est = Vec::with_capacity(m);
    let mut z_est = Vec::with_capacity(m);
    let nn = n * n;
    for j in (0..m).rev() {
        let k = k_a + j;
        let reg_err = |source| BsdeError::Regression { step: k, source };
        if window.is_empty() {
            let lo = (j + 1).saturating_sub(FEATURE_WINDOW);
            window = window_features(&map, ens, k_a + lo, j + 1 - lo);
        }
        let fm = window.pop().expect("window covers step j");
        let design = Design::new(&fm, cfg).map_err(reg_err)?;
        let (head, next) = sol.y.split_at_mut((j + 1) * n_paths * n);
        let y_next = &next[..n_paths * n];
        let dw = noise.step(j);
        let (cont, y_hat, z_fit, z_hat) = continuation_and_z(&design, &fm, basis, y_next, n, dw, dt).map_err(reg_err)?;

        let driver_at = |y_vals: &[f64]| -> Vec<f64> {
            let mut f = vec![0.0; n_paths * n];
            f.par_chunks_mut(n).enumerate().for_each(|(path, out)| {
                let view = ens.view(path, k);
                p.driver(&view, &y_vals[path * n..(path + 1) * n], &z_hat[path * nn..(path + 1) * nn], out);
            });
            f
        };
        let f = driver_at(&y_hat);
        let (est, y_now) = if f.iter().all(|v| *v == 0.0) {
            (cont, y_hat)
        } else {
            let target = |f: &[f64]| -> Vec<f64> { y_next.iter().zip(f).map(|(y, f)| y + f * dt).collect() };
            let mut est = design.fit(&fm, &target(&f), n, basis).map_err(reg_err)?;
            let mut y_now = est.predict_all(&fm);
            if cfg.implicit_driver {
                for _ in 0..IMPLICIT_SWEEPS {
                    let f = driver_at(&y_now);
                    let next_est = design.fit(&fm, &target(&f), n, basis).map_err(reg_err)?;
                    let next = next_est.predict_all(&fm);
                    let change = next.iter().zip(&y_now).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    est = next_est;
                    y_now = next;
                    if change <= IMPLICIT_TOL {
                        break;
                    }
                }
            }
            (est, y_now)
        };
        if y_now.iter().chain(&z_hat).any(|v| !v.is_finite()) {
            return Err(BsdeError::NonFinite(k));
        }
        head[j * n_paths * n..].copy_from_slice(&y_now);
        sol.z[j * n_paths * nn..(j + 1) * n_paths * nn].copy_from_slice(&z_hat);
        y_est.push(est);
        z_est.push(z_fit);
    }
    y_est.reverse();
    z_est.reverse();
    sol.y_estimators = y_est;
    sol.z_estimators = z_est;
    Ok(sol)
}
