//! Discrete paths on uniform grids and the path norm
//! `‖x‖²_{2,t} = ∫₀ᵗ|x(s)|²ds + |x(t)|²` (left-rectangle quadrature).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default absolute tolerance when gluing a prefix to a suffix.
pub const TOL_CONCAT: f64 = 1e-12;

/// Relative tolerance used when comparing step sizes of two grids.
const DT_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PathError {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("grid index {index} out of range 0..={max}")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("paths live on different grids")]
    GridMismatch,
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value at grid index {0}")]
    NonFinite(usize),
    #[error("junction mismatch {gap:e} exceeds tolerance {tol:e}")]
    JunctionMismatch { gap: f64, tol: f64 },
    #[error("state dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// Uniform grid `t_k = t0 + k·dt`, `k = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, n_steps: usize) -> Result<Self, PathError> {
        if !(t0.is_finite() && t_end.is_finite()) {
            return Err(PathError::InvalidGrid("non-finite endpoints".into()));
        }
        if t_end <= t0 {
            return Err(PathError::InvalidGrid(format!("T = {t_end} must exceed t0 = {t0}")));
        }
        if n_steps == 0 {
            return Err(PathError::InvalidGrid("n_steps must be at least 1".into()));
        }
        Ok(Self { t0, t_end, n_steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.n_steps as f64
    }

    /// Grid time of index `k`; the last index returns `T` exactly.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t_end
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    /// Sub-grid covering indices `k_a..=k_b`.
    pub fn sub(&self, k_a: usize, k_b: usize) -> Result<TimeGrid, PathError> {
        if k_b > self.n_steps {
            return Err(PathError::IndexOutOfRange { index: k_b, max: self.n_steps });
        }
        if k_a >= k_b {
            return Err(PathError::InvalidGrid(format!("empty sub-grid {k_a}..{k_b}")));
        }
        TimeGrid::new(self.time(k_a), self.time(k_b), k_b - k_a)
    }

    /// Index of `t` on this grid, if `t` is a grid point up to rounding.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = (t - self.t0) / self.dt();
        let k = x.round();
        if k < 0.0 || k > self.n_steps as f64 || (x - k).abs() > 1e-7 {
            return None;
        }
        Some(k as usize)
    }

    /// Same step size, up to rounding.
    pub fn same_step(&self, other: &TimeGrid) -> bool {
        let (a, b) = (self.dt(), other.dt());
        (a - b).abs() <= DT_REL_TOL * a.abs().max(b.abs())
    }

    /// Whether `other` starts at index `k` of this grid with the same step.
    pub fn aligned_at(&self, k: usize, other: &TimeGrid) -> bool {
        k <= self.n_steps
            && self.same_step(other)
            && (self.time(k) - other.t0).abs() <= DT_REL_TOL * (1.0 + self.t_end.abs())
    }
}

/// Read-only view of one path prefix `x_0..=x_k`.
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    t0: f64,
    dt: f64,
    dim: usize,
    values: &'a [f64],
}

impl<'a> PathView<'a> {
    /// `values` holds `(k+1)·dim` entries, time-major.
    pub fn new(t0: f64, dt: f64, dim: usize, values: &'a [f64]) -> Self {
        debug_assert!(dim > 0 && values.len() % dim == 0 && !values.is_empty());
        Self { t0, dt, dim, values }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn last_index(&self) -> usize {
        self.values.len() / self.dim - 1
    }

    pub fn time(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.dt
    }

    /// Time of the last stored point.
    pub fn now(&self) -> f64 {
        self.time(self.last_index())
    }

    pub fn state(&self, j: usize) -> &'a [f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn current(&self) -> &'a [f64] {
        self.state(self.last_index())
    }

    pub fn values(&self) -> &'a [f64] {
        self.values
    }

    /// Shorter prefix ending at index `j`.
    pub fn truncate(&self, j: usize) -> PathView<'a> {
        PathView { values: &self.values[..(j + 1) * self.dim], ..*self }
    }

    /// Left-rectangle running integral `Σ_{j<k} x_j dt`, written to `out`.
    pub fn running_integral(&self, out: &mut [f64]) {
        out.fill(0.0);
        for j in 0..self.last_index() {
            for (o, x) in out.iter_mut().zip(self.state(j)) {
                *o += x * self.dt;
            }
        }
    }

    /// `‖x‖²_{2,t_k}` for the whole view.
    pub fn norm_sq(&self) -> f64 {
        let k = self.last_index();
        let integral: f64 = (0..k).map(|j| sq_norm(self.state(j))).sum::<f64>() * self.dt;
        integral + sq_norm(self.state(k))
    }
}

pub(crate) fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// A path known on the grid up to some index (a full path when that index is `n_steps`).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePath {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl DiscretePath {
    /// `values` is time-major and may cover any prefix `0..=k` of the grid.
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self, PathError> {
        if dim == 0 {
            return Err(PathError::DimensionMismatch(0, 1));
        }
        if values.is_empty() || values.len() % dim != 0 || values.len() / dim > grid.n_points() {
            return Err(PathError::LengthMismatch { expected: grid.n_points() * dim, got: values.len() });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(PathError::NonFinite(pos / dim));
        }
        Ok(Self { grid, dim, values })
    }

    /// Full path from a closure evaluated at each grid time.
    pub fn from_fn(grid: TimeGrid, dim: usize, f: impl Fn(f64) -> Vec<f64>) -> Result<Self, PathError> {
        let mut values = Vec::with_capacity(grid.n_points() * dim);
        for k in 0..grid.n_points() {
            let x = f(grid.time(k));
            if x.len() != dim {
                return Err(PathError::DimensionMismatch(x.len(), dim));
            }
            values.extend(x);
        }
        Self::new(grid, dim, values)
    }

    pub fn constant(grid: TimeGrid, x: &[f64]) -> Result<Self, PathError> {
        Self::from_fn(grid, x.len(), |_| x.to_vec())
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn last_index(&self) -> usize {
        self.values.len() / self.dim - 1
    }

    pub fn is_complete(&self) -> bool {
        self.last_index() == self.grid.n_steps()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn view(&self) -> PathView<'_> {
        PathView::new(self.grid.t0(), self.grid.dt(), self.dim, &self.values)
    }

    /// Prefix view ending at index `k`.
    pub fn view_to(&self, k: usize) -> Result<PathView<'_>, PathError> {
        if k > self.last_index() {
            return Err(PathError::IndexOutOfRange { index: k, max: self.last_index() });
        }
        Ok(self.view().truncate(k))
    }

    pub fn scaled(&self, c: f64) -> DiscretePath {
        DiscretePath { values: self.values.iter().map(|v| c * v).collect(), ..self.clone() }
    }

    /// Prefix path ending at index `k`.
    pub fn truncated(&self, k: usize) -> Result<DiscretePath, PathError> {
        Ok(DiscretePath { values: self.view_to(k)?.values().to_vec(), ..self.clone() })
    }
}

/// `‖p‖²_{2,t_k}`.
pub fn path_norm_sq(p: &DiscretePath, k: usize) -> Result<f64, PathError> {
    Ok(p.view_to(k)?.norm_sq())
}

/// `‖p − q‖²_{2,t_k}`.
pub fn path_distance_sq(p: &DiscretePath, q: &DiscretePath, k: usize) -> Result<f64, PathError> {
    if p.grid != q.grid {
        return Err(PathError::GridMismatch);
    }
    if p.dim != q.dim {
        return Err(PathError::DimensionMismatch(p.dim, q.dim));
    }
    let max = p.last_index().min(q.last_index());
    if k > max {
        return Err(PathError::IndexOutOfRange { index: k, max });
    }
    let n = (k + 1) * p.dim;
    let diff: Vec<f64> = p.values[..n].iter().zip(&q.values[..n]).map(|(a, b)| a - b).collect();
    Ok(PathView::new(p.grid.t0(), p.grid.dt(), p.dim, &diff).norm_sq())
}

/// Glue `prefix` (ending at its last index) to `suffix` (starting where the prefix ends).
/// The junction value is taken from the prefix.
pub fn path_concat(prefix: &DiscretePath, suffix: &DiscretePath, tol: f64) -> Result<DiscretePath, PathError> {
    if prefix.dim != suffix.dim {
        return Err(PathError::DimensionMismatch(prefix.dim, suffix.dim));
    }
    let k = prefix.last_index();
    if !prefix.grid.aligned_at(k, &suffix.grid) {
        return Err(PathError::GridMismatch);
    }
    let gap = prefix
        .state(k)
        .iter()
        .zip(suffix.state(0))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if gap > tol {
        return Err(PathError::JunctionMismatch { gap, tol });
    }
    let m = suffix.last_index();
    if m == 0 {
        return Ok(prefix.clone());
    }
    // Same step size, so the prefix grid is reused whenever it is long enough.
    let grid = if k + m <= prefix.grid.n_steps() {
        prefix.grid
    } else {
        TimeGrid::new(prefix.grid.t0(), suffix.grid.time(m), k + m)?
    };
    let mut values = prefix.values.clone();
    values.extend_from_slice(&suffix.values[suffix.dim..]);
    DiscretePath::new(grid, prefix.dim, values)
}

/// Monte Carlo ensemble of paths sharing one grid, all known up to `last_index`.
/// Storage is path-major: entry `(p, k, i)` sits at `p·(last_index+1)·dim + k·dim + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    dim: usize,
    n_paths: usize,
    last_index: usize,
    data: Vec<f64>,
}

impl PathEnsemble {
    pub fn from_data(grid: TimeGrid, dim: usize, n_paths: usize, last_index: usize, data: Vec<f64>) -> Result<Self, PathError> {
        if last_index > grid.n_steps() {
            return Err(PathError::IndexOutOfRange { index: last_index, max: grid.n_steps() });
        }
        let expected = n_paths * (last_index + 1) * dim;
        if n_paths == 0 || dim == 0 || data.len() != expected {
            return Err(PathError::LengthMismatch { expected, got: data.len() });
        }
        Ok(Self { grid, dim, n_paths, last_index, data })
    }

    /// Every path starts at its own initial state; `initial` is `n_paths × dim`.
    pub fn from_initial(grid: TimeGrid, dim: usize, initial: Vec<f64>) -> Result<Self, PathError> {
        let n_paths = initial.len() / dim.max(1);
        Self::from_data(grid, dim, n_paths, 0, initial)
    }

    /// All paths start at `x0`.
    pub fn constant_start(grid: TimeGrid, x0: &[f64], n_paths: usize) -> Result<Self, PathError> {
        let data = x0.iter().copied().cycle().take(n_paths * x0.len()).collect();
        Self::from_initial(grid, x0.len(), data)
    }

    pub fn from_paths(paths: &[DiscretePath]) -> Result<Self, PathError> {
        let first = paths.first().ok_or(PathError::LengthMismatch { expected: 1, got: 0 })?;
        let mut data = Vec::with_capacity(paths.len() * first.values.len());
        for p in paths {
            if p.grid != first.grid || p.last_index() != first.last_index() {
                return Err(PathError::GridMismatch);
            }
            if p.dim != first.dim {
                return Err(PathError::DimensionMismatch(p.dim, first.dim));
            }
            data.extend_from_slice(&p.values);
        }
        Self::from_data(first.grid, first.dim, paths.len(), first.last_index(), data)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn last_index(&self) -> usize {
        self.last_index
    }

    pub fn stride(&self) -> usize {
        (self.last_index + 1) * self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn path_values(&self, p: usize) -> &[f64] {
        let s = self.stride();
        &self.data[p * s..(p + 1) * s]
    }

    pub fn state(&self, p: usize, k: usize) -> &[f64] {
        let off = p * self.stride() + k * self.dim;
        &self.data[off..off + self.dim]
    }

    /// View of path `p` up to index `k`.
    pub fn view(&self, p: usize, k: usize) -> PathView<'_> {
        let off = p * self.stride();
        PathView::new(self.grid.t0(), self.grid.dt(), self.dim, &self.data[off..off + (k + 1) * self.dim])
    }

    pub fn path(&self, p: usize) -> DiscretePath {
        DiscretePath { grid: self.grid, dim: self.dim, values: self.path_values(p).to_vec() }
    }

    /// Copy of this ensemble with room for `last_index` points per path; new entries are zero.
    pub(crate) fn extended(&self, last_index: usize) -> Result<PathEnsemble, PathError> {
        if last_index < self.last_index || last_index > self.grid.n_steps() {
            return Err(PathError::IndexOutOfRange { index: last_index, max: self.grid.n_steps() });
        }
        let new_stride = (last_index + 1) * self.dim;
        let old = self.stride();
        let mut data = vec![0.0; self.n_paths * new_stride];
        for (dst, src) in data.chunks_mut(new_stride).zip(self.data.chunks(old)) {
            dst[..old].copy_from_slice(src);
        }
        Self::from_data(self.grid, self.dim, self.n_paths, last_index, data)
    }
}
