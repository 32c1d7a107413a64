//! Reproducible Brownian increments and Euler–Maruyama simulation of the forward
//! equation with path-prefix coefficients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::sync::OnceLock;
use thiserror::Error;

use crate::bsde_engine::BackwardSolution;
use crate::path_space::{PathEnsemble, PathError, PathView, TimeGrid};
use crate::problem::FBSDEProblem;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulationError {
    #[error("non-finite forward state at grid index {0}")]
    NonFinite(usize),
    #[error("noise grid does not continue the prefix grid")]
    GridMismatch,
    #[error("path count mismatch: {0} vs {1}")]
    PathCount(usize, usize),
    #[error("candidate does not cover the simulation interval")]
    Candidate,
    #[error(transparent)]
    Path(#[from] PathError),
}

/// i.i.d. `N(0, dt·I_n)` increments, path-major: `(p, j, i)` at `p·steps·n + j·n + i`.
#[derive(Debug, Clone)]
pub struct BrownianBatch {
    grid: TimeGrid,
    n_paths: usize,
    dim: usize,
    seed: u64,
    increments: Vec<f64>,
    /// The same increments regrouped by step, built on first use.
    by_step: OnceLock<Vec<f64>>,
}

impl PartialEq for BrownianBatch {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid
            && self.n_paths == other.n_paths
            && self.dim == other.dim
            && self.seed == other.seed
            && self.increments == other.increments
    }
}

/// Each path draws from its own ChaCha stream, so batches do not depend on thread count.
pub fn generate_brownian(grid: TimeGrid, n_paths: usize, dim: usize, seed: u64) -> BrownianBatch {
    let per_path = grid.n_steps() * dim;
    let sd = grid.dt().sqrt();
    let mut increments = vec![0.0; n_paths * per_path];
    increments.par_chunks_mut(per_path.max(1)).enumerate().for_each(|(p, chunk)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        for v in chunk.iter_mut() {
            *v = sd * rng.sample::<f64, _>(StandardNormal);
        }
    });
    BrownianBatch { grid, n_paths, dim, seed, increments, by_step: OnceLock::new() }
}

impl BrownianBatch {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn path(&self, p: usize) -> &[f64] {
        let s = self.grid.n_steps() * self.dim;
        &self.increments[p * s..(p + 1) * s]
    }

    /// `ΔW` of every path over step `j`, as `n_paths × n`.
    pub fn step(&self, j: usize) -> &[f64] {
        let (np, n, m) = (self.n_paths, self.dim, self.grid.n_steps());
        let all = self.by_step.get_or_init(|| {
            let mut out = vec![0.0; self.increments.len()];
            for p in 0..np {
                for j in 0..m {
                    out[(j * np + p) * n..(j * np + p + 1) * n].copy_from_slice(self.increment(p, j));
                }
            }
            out
        });
        &all[j * np * n..(j + 1) * np * n]
    }

    /// `ΔW` of path `p` over step `j` of this batch's grid.
    pub fn increment(&self, p: usize, j: usize) -> &[f64] {
        let off = (p * self.grid.n_steps() + j) * self.dim;
        &self.increments[off..off + self.dim]
    }
}

/// Stateless 64-bit mixer used to derive independent seeds for sub-tasks.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut x = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Candidate backward processes `(y, z)` fed to the forward equation.
pub trait CandidateField: Sync {
    /// Writes `y` (length n) and `z` (n×n) at the last index of `path`.
    fn eval(&self, path: &PathView, y: &mut [f64], z: &mut [f64]);
}

#[derive(Clone, Copy)]
pub enum BackwardCandidate<'a> {
    /// `(y, z) ≡ (0, 0)`.
    Zero,
    /// Per-path values from a previous backward pass over the same interval.
    Stored(&'a BackwardSolution),
    /// A functional of the path prefix.
    Field(&'a dyn CandidateField),
}

/// Euler–Maruyama from the end of `prefix` across the grid of `noise`.
/// A single-path prefix is broadcast to every noise path.
pub fn simulate_forward(
    p: &FBSDEProblem,
    cand: BackwardCandidate,
    prefix: &PathEnsemble,
    noise: &BrownianBatch,
) -> Result<PathEnsemble, SimulationError> {
    let k_a = prefix.last_index();
    check_alignment(prefix.grid(), k_a, noise)?;
    let k_b = k_a + noise.grid().n_steps();
    let mut out = if prefix.n_paths() == noise.n_paths() {
        prefix.extended(k_b)?
    } else if prefix.n_paths() == 1 {
        let start = PathEnsemble::from_data(
            *prefix.grid(),
            prefix.dim(),
            noise.n_paths(),
            k_a,
            prefix.data().iter().copied().cycle().take(noise.n_paths() * prefix.stride()).collect(),
        )?;
        start.extended(k_b)?
    } else {
        return Err(SimulationError::PathCount(prefix.n_paths(), noise.n_paths()));
    };
    simulate_into(p, cand, &mut out, k_a, noise)?;
    Ok(out)
}

fn check_alignment(grid: &TimeGrid, k_a: usize, noise: &BrownianBatch) -> Result<(), SimulationError> {
    if !grid.aligned_at(k_a, noise.grid()) || k_a + noise.grid().n_steps() > grid.n_steps() {
        return Err(SimulationError::GridMismatch);
    }
    Ok(())
}

/// Overwrites indices `k_a+1..=k_a+m` of every path in `ens`, keeping the prefix.
pub(crate) fn simulate_into(
    p: &FBSDEProblem,
    cand: BackwardCandidate,
    ens: &mut PathEnsemble,
    k_a: usize,
    noise: &BrownianBatch,
) -> Result<(), SimulationError> {
    let (d, n) = (p.d, p.n);
    if ens.dim() != d || noise.dim() != n {
        return Err(SimulationError::Path(PathError::DimensionMismatch(ens.dim(), d)));
    }
    if ens.n_paths() != noise.n_paths() {
        return Err(SimulationError::PathCount(ens.n_paths(), noise.n_paths()));
    }
    check_alignment(ens.grid(), k_a, noise)?;
    let m = noise.grid().n_steps();
    if ens.last_index() < k_a + m {
        return Err(SimulationError::GridMismatch);
    }
    if let BackwardCandidate::Stored(sol) = cand {
        if sol.n_paths() != ens.n_paths() || sol.n_steps() != m {
            return Err(SimulationError::Candidate);
        }
    }
    let grid = *ens.grid();
    let (t0, dt) = (grid.t0(), grid.dt());
    let stride = ens.stride();
    let first_bad = ens
        .data_mut()
        .par_chunks_mut(stride)
        .enumerate()
        .filter_map(|(path, values)| {
            let mut b = vec![0.0; d];
            let mut s = vec![0.0; d * n];
            let mut yb = vec![0.0; n];
            let mut zb = vec![0.0; n * n];
            for j in 0..m {
                let k = k_a + j;
                let (head, tail) = values.split_at_mut((k + 1) * d);
                let view = PathView::new(t0, dt, d, head);
                let (y, z): (&[f64], &[f64]) = match cand {
                    BackwardCandidate::Zero => (&yb, &zb),
                    BackwardCandidate::Stored(sol) => (sol.y(path, j), sol.z(path, j)),
                    BackwardCandidate::Field(f) => {
                        f.eval(&view, &mut yb, &mut zb);
                        (&yb, &zb)
                    }
                };
                p.drift(&view, y, z, &mut b);
                p.diffusion(&view, y, z, &mut s);
                let dw = noise.increment(path, j);
                let x = view.current();
                let mut finite = true;
                for i in 0..d {
                    let noise_term: f64 = (0..n).map(|l| s[i * n + l] * dw[l]).sum();
                    let v = x[i] + b[i] * dt + noise_term;
                    finite &= v.is_finite();
                    tail[i] = v;
                }
                if !finite {
                    return Some(k + 1);
                }
            }
            None
        })
        .min();
    match first_bad {
        Some(k) => Err(SimulationError::NonFinite(k)),
        None => Ok(()),
    }
}
