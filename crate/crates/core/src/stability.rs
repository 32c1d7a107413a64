//! Paired solves of two problems on common Brownian increments, and the
//! resulting empirical stability constant.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::global_solver::{block_count, norm_profile, plan_for, solve, GlobalConfig, GlobalError, GlobalSolution};
use crate::path_space::PathView;
use crate::problem::{Coefficients, FBSDEProblem, ProblemClass, ProblemError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StabilityError {
    #[error("dimension mismatch: (d, n) = {left:?} vs {right:?}")]
    Dimension { left: (usize, usize), right: (usize, usize) },
    #[error("grid mismatch between the baseline solution and the problems")]
    Grid,
    #[error("problems are in different regimes: {left} vs {right}")]
    RegimeMismatch { left: ProblemClass, right: ProblemClass },
    #[error(transparent)]
    Global(#[from] GlobalError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// Constant shifts added to every component of the coefficients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Shift {
    pub drift: f64,
    pub diffusion: f64,
    pub driver: f64,
    pub terminal: f64,
}

struct Shifted {
    base: Arc<dyn Coefficients>,
    shift: Shift,
}

fn add(out: &mut [f64], c: f64) {
    if c != 0.0 {
        out.iter_mut().for_each(|v| *v += c);
    }
}

impl Coefficients for Shifted {
    fn drift(&self, path: &PathView, y: &[f64], z: &[f64], out: &mut [f64]) {
        self.base.drift(path, y, z, out);
        add(out, self.shift.drift);
    }
    fn diffusion(&self, path: &PathView, y: &[f64], z: &[f64], out: &mut [f64]) {
        self.base.diffusion(path, y, z, out);
        add(out, self.shift.diffusion);
    }
    fn driver(&self, path: &PathView, y: &[f64], z: &[f64], out: &mut [f64]) {
        self.base.driver(path, y, z, out);
        add(out, self.shift.driver);
    }
    fn terminal(&self, path: &PathView, out: &mut [f64]) {
        self.base.terminal(path, out);
        add(out, self.shift.terminal);
    }
}

/// `p` with constant shifts; Lipschitz data and class are unchanged.
pub fn shifted(p: &FBSDEProblem, shift: Shift) -> Result<FBSDEProblem, StabilityError> {
    let coeffs = Arc::new(Shifted { base: p.coefficients().clone(), shift });
    Ok(FBSDEProblem::new(format!("{}+shift", p.name), p.d, p.n, p.x0.clone(), p.lipschitz, p.declared_class, coeffs)?
        .path_dependent(p.path_dependent))
}

fn check_dims(p: &FBSDEProblem, q: &FBSDEProblem) -> Result<(), StabilityError> {
    if (p.d, p.n) != (q.d, q.n) {
        return Err(StabilityError::Dimension { left: (p.d, p.n), right: (q.d, q.n) });
    }
    Ok(())
}

/// `E[(∫|Δf| + |Δb| dt)² + ∫|Δσ|² dt]` with `Δφ = φ − φ′` evaluated along the
/// baseline trajectories of `p′`.
pub fn delta_i0(p: &FBSDEProblem, p_prime: &FBSDEProblem, baseline: &GlobalSolution) -> Result<f64, StabilityError> {
    check_dims(p, p_prime)?;
    if baseline.n != p.n || baseline.ensemble.dim() != p.d {
        return Err(StabilityError::Grid);
    }
    let grid = baseline.grid;
    let (d, n, dt, n_steps) = (p.d, p.n, grid.dt(), grid.n_steps());
    let n_paths = baseline.n_paths();
    let per_chunk: Vec<f64> = (0..n_paths.div_ceil(1024))
        .into_par_iter()
        .map(|c| {
            let (mut b1, mut b2) = (vec![0.0; d], vec![0.0; d]);
            let (mut s1, mut s2) = (vec![0.0; d * n], vec![0.0; d * n]);
            let (mut f1, mut f2) = (vec![0.0; n], vec![0.0; n]);
            let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            let mut acc = 0.0;
            for path in c * 1024..((c + 1) * 1024).min(n_paths) {
                let (mut first, mut second) = (0.0, 0.0);
                for k in 0..n_steps {
                    let view = baseline.ensemble.view(path, k);
                    let (y, z) = (baseline.y(path, k), baseline.z(path, k));
                    p.drift(&view, y, z, &mut b1);
                    p_prime.drift(&view, y, z, &mut b2);
                    p.diffusion(&view, y, z, &mut s1);
                    p_prime.diffusion(&view, y, z, &mut s2);
                    p.driver(&view, y, z, &mut f1);
                    p_prime.driver(&view, y, z, &mut f2);
                    first += (diff(&f1, &f2).sqrt() + diff(&b1, &b2).sqrt()) * dt;
                    second += diff(&s1, &s2) * dt;
                }
                acc += first * first + second;
            }
            acc
        })
        .collect();
    Ok(per_chunk.into_iter().sum::<f64>() / n_paths as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub problem: String,
    pub problem_prime: String,
    pub delta_i0_sq: f64,
    pub dx_sq: f64,
    /// `E|Δg(X′)|²`.
    pub dg_sq: f64,
    pub rhs_driver: f64,
    /// `sup_k E[‖ΔX‖²_{2,t_k} + |ΔY_k|² + Σ_{j≥k}|ΔZ_j|² dt]`.
    pub lhs: f64,
    /// Grid time where the supremum is attained, and its three parts.
    pub sup_time: f64,
    pub lhs_x: f64,
    pub lhs_y: f64,
    pub lhs_z: f64,
    /// `lhs / rhs_driver`; `None` when both vanish.
    pub ratio: Option<f64>,
    pub seed: u64,
    pub n_paths: usize,
    pub n_blocks: usize,
    pub n_steps: usize,
}

/// Solves `p` from `x0` and `p′` from `x0′` on one block layout with common
/// seeds, then compares the two solutions path by path.
pub fn stability_report(
    p: &FBSDEProblem,
    p_prime: &FBSDEProblem,
    x0: &[f64],
    x0_prime: &[f64],
    horizon: f64,
    cfg: &GlobalConfig,
) -> Result<StabilityReport, StabilityError> {
    check_dims(p, p_prime)?;
    if p.declared_class != p_prime.declared_class {
        return Err(StabilityError::RegimeMismatch { left: p.declared_class, right: p_prime.declared_class });
    }
    let p = p.clone().with_x0(x0.to_vec())?;
    let q = p_prime.clone().with_x0(x0_prime.to_vec())?;
    let n_blocks = match cfg.force_blocks {
        Some(b) => b,
        None => {
            let (plan_p, _) = plan_for(&p, horizon, cfg)?;
            let (plan_q, _) = plan_for(&q, horizon, cfg)?;
            for plan in [&plan_p, &plan_q] {
                if !plan.feasible {
                    return Err(GlobalError::Infeasible {
                        blocking_time: plan.blocking_time,
                        reason: plan.reason.clone().unwrap_or_default(),
                    }
                    .into());
                }
            }
            block_count(&plan_p, cfg).0.max(block_count(&plan_q, cfg).0)
        }
    };
    let common = GlobalConfig { force_blocks: Some(n_blocks), ..cfg.clone() };
    let (left, right) = rayon::join(|| solve(&p, horizon, &common), || solve(&q, horizon, &common));
    let ((_, sol), (_, base)) = (left?, right?);

    let grid = base.grid;
    let (d, n, n_steps) = (p.d, p.n, grid.n_steps());
    let sq_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let profile = norm_profile(
        grid,
        base.n_paths(),
        |path, k| sq_diff(&sol.ensemble.path_values(path)[k * d..(k + 1) * d], &base.ensemble.path_values(path)[k * d..(k + 1) * d]),
        |path, k| sq_diff(sol.y(path, k), base.y(path, k)),
        |path, k| sq_diff(sol.z(path, k), base.z(path, k)),
    );
    let (k_sup, lhs) = profile.sup();

    let dg_chunks: Vec<f64> = (0..base.n_paths().div_ceil(1024))
        .into_par_iter()
        .map(|c| {
            let (mut g1, mut g2) = (vec![0.0; n], vec![0.0; n]);
            (c * 1024..((c + 1) * 1024).min(base.n_paths()))
                .map(|path| {
                    let view = base.ensemble.view(path, n_steps);
                    p.terminal(&view, &mut g1);
                    q.terminal(&view, &mut g2);
                    sq_diff(&g1, &g2)
                })
                .sum::<f64>()
        })
        .collect();
    let dg_sq = dg_chunks.into_iter().sum::<f64>() / base.n_paths() as f64;
    let dx_sq = sq_diff(x0, x0_prime);
    let delta_i0_sq = delta_i0(&p, &q, &base)?;
    let rhs_driver = dx_sq + dg_sq + delta_i0_sq;
    let ratio = if rhs_driver > 0.0 {
        Some(lhs / rhs_driver)
    } else if lhs == 0.0 {
        None
    } else {
        Some(f64::INFINITY)
    };
    Ok(StabilityReport {
        problem: p.name.clone(),
        problem_prime: q.name.clone(),
        delta_i0_sq,
        dx_sq,
        dg_sq,
        rhs_driver,
        lhs,
        sup_time: grid.time(k_sup),
        lhs_x: profile.x[k_sup],
        lhs_y: profile.y[k_sup],
        lhs_z: profile.z[k_sup],
        ratio,
        seed: cfg.seed,
        n_paths: cfg.n_paths,
        n_blocks,
        n_steps,
    })
}

/// Reports for `p` against `p` with the driver shifted by each `c`.
pub fn driver_shift_sweep(p: &FBSDEProblem, sizes: &[f64], horizon: f64, cfg: &GlobalConfig) -> Result<Vec<StabilityReport>, StabilityError> {
    sizes
        .iter()
        .map(|&c| {
            let q = shifted(p, Shift { driver: c, ..Default::default() })?;
            stability_report(&q, p, &p.x0, &p.x0, horizon, cfg)
        })
        .collect()
}
