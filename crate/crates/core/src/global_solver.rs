//! Backward construction of the decoupling field block by block, and the
//! forward sweep that patches local solutions into a solution on `[0, T]`.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::bsde_engine::{FeatureMap, LinearEstimator};
use crate::dominating_ode::{t_max_for_lipschitz, LipschitzHorizon, OdeError};
use crate::path_space::{PathEnsemble, PathError, PathView, TimeGrid};
use crate::picard_solver::{best_gamma, local_solve_with_field, ContractionCheck, FrozenTerminal, LocalConfig, LocalSolution, PicardError};
use crate::problem::{FBSDEProblem, MonotonicityReport};
use crate::sde_engine::{derive_seed, generate_brownian, simulate_forward, BackwardCandidate, CandidateField, SimulationError};
use crate::step_planner::{plan_steps, PlannerError, SearchConfig, StepPlan};

const TAG_TRAIN_INIT: u64 = 1;
const TAG_TRAIN_PREFIX: u64 = 2;
const TAG_TRAIN_NOISE: u64 = 3;
const TAG_SOLVE: u64 = 4;
const TAG_LIPSCHITZ: u64 = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GlobalError {
    #[error("infeasible at t = {blocking_time:?}: {reason}")]
    Infeasible { blocking_time: Option<f64>, reason: String },
    #[error("local solve on [{t_a}, {t_b}] failed: {source}")]
    Local { t_a: f64, t_b: f64, source: PicardError },
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error("grid index {index} outside 0..={max}")]
    Index { index: usize, max: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalConfig {
    pub steps_per_interval: usize,
    pub n_paths: usize,
    /// Paths used to fit the field; `None` uses `n_paths`.
    pub training_paths: Option<usize>,
    pub seed: u64,
    pub min_blocks: usize,
    pub max_blocks: usize,
    /// Overrides the block count derived from the plan.
    pub force_blocks: Option<usize>,
    /// Standard deviation of training initial states around `x0`.
    pub initial_spread: f64,
    pub local: LocalConfig,
    pub search: SearchConfig,
    pub monotonicity: Option<MonotonicityReport>,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            steps_per_interval: 50,
            n_paths: 10_000,
            training_paths: None,
            seed: 0,
            min_blocks: 1,
            max_blocks: 5,
            force_blocks: None,
            initial_spread: 1.0,
            local: LocalConfig::default(),
            search: SearchConfig::default(),
            monotonicity: None,
        }
    }
}

/// Diagnostics of one solve block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReport {
    pub t_a: f64,
    pub t_b: f64,
    pub k_a: usize,
    pub k_b: usize,
    /// Lipschitz bound of the block's terminal condition, from the schedule.
    pub k_terminal: f64,
    /// Smallest closed-form `γ` over `ε` at the block length.
    pub gamma_theory: Option<f64>,
    /// Whether `gamma_theory < 1`, i.e. the block is short enough for the proof's contraction.
    pub certified: bool,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub contraction_estimate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct FieldBlock {
    k_a: usize,
    k_b: usize,
    k_terminal: f64,
    y_estimators: Vec<LinearEstimator>,
    z_estimators: Vec<LinearEstimator>,
}

/// Regression representation of `u(t_k, ·)` at every grid index before `T`.
#[derive(Clone)]
pub struct DecouplingField {
    pub plan: StepPlan,
    pub lipschitz: LipschitzHorizon,
    pub grid: TimeGrid,
    /// Whether fewer solve blocks than plan intervals were used.
    pub coarsened: bool,
    pub training_reports: Vec<BlockReport>,
    pub training_paths: usize,
    pub seed: u64,
    problem: FBSDEProblem,
    map: FeatureMap,
    blocks: Vec<FieldBlock>,
}

impl fmt::Debug for DecouplingField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DecouplingField")
            .field("problem", &self.problem.name)
            .field("grid", &self.grid)
            .field("blocks", &self.blocks.len())
            .field("coarsened", &self.coarsened)
            .finish()
    }
}

impl DecouplingField {
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// `(k_a, k_b)` of every block.
    pub fn block_bounds(&self) -> Vec<(usize, usize)> {
        self.blocks.iter().map(|b| (b.k_a, b.k_b)).collect()
    }

    pub fn problem(&self) -> &FBSDEProblem {
        &self.problem
    }

    pub fn y_estimator(&self, k: usize) -> Option<&LinearEstimator> {
        let b = self.blocks.iter().find(|b| b.k_a <= k && k < b.k_b)?;
        Some(&b.y_estimators[k - b.k_a])
    }

    pub fn z_estimator(&self, k: usize) -> Option<&LinearEstimator> {
        let b = self.blocks.iter().find(|b| b.k_a <= k && k < b.k_b)?;
        Some(&b.z_estimators[k - b.k_a])
    }

    /// `K` bound at the grid index `k`, from the dominating ODE.
    pub fn k_bound(&self, k: usize) -> f64 {
        self.lipschitz.solution.k_at(self.grid.time(k))
    }
}

/// The fitted `(u, ẑ)` of one block, as a Picard starting point.
struct BlockCandidate<'a> {
    field: &'a DecouplingField,
    block: usize,
}

impl CandidateField for BlockCandidate<'_> {
    fn eval(&self, path: &PathView, y: &mut [f64], z: &mut [f64]) {
        let b = &self.field.blocks[self.block];
        let j = path.last_index() - b.k_a;
        self.field.map.with_features(path, |feats| {
            b.y_estimators[j].predict(feats, y);
            b.z_estimators[j].predict(feats, z);
        });
    }
}

/// `u(t_k, prefix)`; at `k = N` this is the terminal functional itself.
pub fn eval_field(field: &DecouplingField, k: usize, prefix: &PathView, out: &mut [f64]) -> Result<(), GlobalError> {
    let n_steps = field.grid.n_steps();
    if k > n_steps {
        return Err(GlobalError::Index { index: k, max: n_steps });
    }
    if prefix.last_index() != k || (prefix.dt() - field.grid.dt()).abs() > 1e-12 * field.grid.dt() {
        return Err(GlobalError::Config(format!("prefix must end at grid index {k} of the field's grid")));
    }
    if k == n_steps {
        field.problem.terminal(prefix, out);
        return Ok(());
    }
    let est = field.y_estimator(k).ok_or(GlobalError::Index { index: k, max: n_steps })?;
    field.map.with_features(prefix, |feats| est.predict(feats, out));
    Ok(())
}

/// Blocks of equal length covering `[0, T]`: as many as the shortest planned
/// interval suggests, clamped to the configured range.
pub(crate) fn block_count(plan: &StepPlan, cfg: &GlobalConfig) -> (usize, bool) {
    if let Some(n) = cfg.force_blocks {
        return (n.max(1), n < plan.n_intervals());
    }
    let lengths: Vec<f64> = plan.intervals.iter().map(|r| r.t_b - r.t_a).collect();
    let min_len = if lengths.len() > 1 { lengths[1..].iter().copied().fold(f64::INFINITY, f64::min) } else { lengths[0] };
    let raw = (plan.horizon / min_len).ceil();
    let lo = cfg.min_blocks.max(1);
    let hi = cfg.max_blocks.max(lo);
    let n = if raw.is_finite() { (raw as usize).clamp(lo, hi) } else { hi };
    (n, (n as f64) < raw)
}

/// The plan (from the dominating-ODE schedule) and the block layout that a
/// solve of `p` on `[0, horizon]` would use.
pub fn plan_for(p: &FBSDEProblem, horizon: f64, cfg: &GlobalConfig) -> Result<(StepPlan, LipschitzHorizon), GlobalError> {
    let lip = t_max_for_lipschitz(&p.lipschitz, p.declared_class, p.d, p.n, horizon, cfg.monotonicity.as_ref())?;
    let schedule = |t: f64| lip.solution.k_at(t);
    let mut plan = plan_steps(&p.lipschitz, horizon, &schedule, &cfg.search)?;
    if let (false, Some(t)) = (plan.feasible, lip.t_max) {
        let reason = plan.reason.take().unwrap_or_default();
        plan.reason = Some(format!("dominating ODE explodes at t = {t}; {reason}"));
    }
    Ok((plan, lip))
}

fn check_config(cfg: &GlobalConfig) -> Result<(), GlobalError> {
    if cfg.steps_per_interval == 0 || cfg.n_paths == 0 || cfg.training_paths == Some(0) {
        return Err(GlobalError::Config("steps and path counts must be positive".into()));
    }
    if !(cfg.initial_spread >= 0.0) {
        return Err(GlobalError::Config("initial spread must be nonnegative".into()));
    }
    Ok(())
}

fn local_err(t_a: f64, t_b: f64) -> impl Fn(PicardError) -> GlobalError {
    move |source| GlobalError::Local { t_a, t_b, source }
}

fn block_report(sol: &LocalSolution, k_a: usize, k_b: usize, k_terminal: f64, gamma_theory: Option<f64>) -> BlockReport {
    BlockReport {
        t_a: sol.t_a,
        t_b: sol.t_b,
        k_a,
        k_b,
        k_terminal,
        gamma_theory,
        certified: gamma_theory.is_some_and(|g| g < 1.0),
        iterations: sol.iterations,
        residual_history: sol.residual_history.clone(),
        contraction_estimate: sol.contraction_estimate,
    }
}

/// Fits `u` backward over the solve blocks. Training paths start from
/// `x0 + spread·N(0, I)` and run the forward equation with `(y, z) = (0, 0)` up
/// to each block, so the regressions see a spread of prefixes. Each block's
/// Picard iteration starts from its terminal condition frozen in time.
pub fn build_decoupling_field(p: &FBSDEProblem, horizon: f64, cfg: &GlobalConfig) -> Result<DecouplingField, GlobalError> {
    check_config(cfg)?;
    let (plan, lip) = plan_for(p, horizon, cfg)?;
    if !plan.feasible {
        return Err(GlobalError::Infeasible {
            blocking_time: plan.blocking_time,
            reason: plan.reason.clone().unwrap_or_default(),
        });
    }
    let (n_blocks, coarsened) = block_count(&plan, cfg);
    let m = cfg.steps_per_interval;
    let grid = TimeGrid::new(0.0, horizon, n_blocks * m)?;
    let n_train = cfg.training_paths.unwrap_or(cfg.n_paths);
    let map = FeatureMap::new(cfg.local.regression.resolve_basis(p.path_dependent), p.d);
    let (d, n) = (p.d, p.n);

    let mut blocks: Vec<FieldBlock> = Vec::with_capacity(n_blocks);
    let mut reports = Vec::with_capacity(n_blocks);
    for i in (0..n_blocks).rev() {
        let (k_a, k_b) = (i * m, (i + 1) * m);
        let (t_a, t_b) = (grid.time(k_a), grid.time(k_b));
        let k_terminal = lip.solution.k_at(t_b);

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_TRAIN_INIT, i as u64));
        let initial: Vec<f64> = (0..n_train * d)
            .map(|j| {
                let e: f64 = StandardNormal.sample(&mut rng);
                p.x0[j % d] + cfg.initial_spread * e
            })
            .collect();
        let mut prefix = PathEnsemble::from_initial(grid, d, initial)?;
        if k_a > 0 {
            let pre_noise = generate_brownian(grid.sub(0, k_a)?, n_train, n, derive_seed(cfg.seed, TAG_TRAIN_PREFIX, i as u64));
            prefix = simulate_forward(p, BackwardCandidate::Zero, &prefix, &pre_noise)?;
        }
        let noise = generate_brownian(grid.sub(k_a, k_b)?, n_train, n, derive_seed(cfg.seed, TAG_TRAIN_NOISE, i as u64));
        let local_cfg = LocalConfig { check: Some(ContractionCheck::SmallTime { k_terminal }), ..cfg.local.clone() };

        let sol = match blocks.last() {
            None => {
                let g = |x: &PathView, o: &mut [f64]| p.terminal(x, o);
                local_solve_with_field(p, &prefix, &g, &noise, &local_cfg, &FrozenTerminal(&g))
            }
            Some(next) => {
                let est = &next.y_estimators[0];
                let u_next = |x: &PathView, o: &mut [f64]| map.with_features(x, |feats| est.predict(feats, o));
                local_solve_with_field(p, &prefix, &u_next, &noise, &local_cfg, &FrozenTerminal(&u_next))
            }
        }
        .map_err(local_err(t_a, t_b))?;
        reports.push(block_report(&sol, k_a, k_b, k_terminal, sol.gamma_theory));
        let LocalSolution { backward, .. } = sol;
        blocks.push(FieldBlock {
            k_a,
            k_b,
            k_terminal,
            y_estimators: backward.y_estimators,
            z_estimators: backward.z_estimators,
        });
    }
    blocks.reverse();
    reports.reverse();
    Ok(DecouplingField {
        plan,
        lipschitz: lip,
        grid,
        coarsened,
        training_reports: reports,
        training_paths: n_train,
        seed: cfg.seed,
        problem: p.clone(),
        map,
        blocks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JunctionGap {
    pub index: usize,
    pub t: f64,
    /// Root mean square over paths of `|Y_right − u(t, X)|`.
    pub rms: f64,
    pub mean_abs: f64,
    /// Standard error of `mean_abs`.
    pub std_err: f64,
}

#[derive(Debug, Clone)]
pub struct GlobalSolution {
    pub grid: TimeGrid,
    pub ensemble: PathEnsemble,
    pub n: usize,
    /// `n_paths × (N+1) × n`.
    y: Vec<f64>,
    /// `n_paths × N × n²`.
    z: Vec<f64>,
    pub junctions: Vec<JunctionGap>,
    pub blocks: Vec<BlockReport>,
    pub seed: u64,
}

impl GlobalSolution {
    pub fn n_paths(&self) -> usize {
        self.ensemble.n_paths()
    }

    pub fn y(&self, p: usize, k: usize) -> &[f64] {
        let off = (p * (self.grid.n_steps() + 1) + k) * self.n;
        &self.y[off..off + self.n]
    }

    pub fn z(&self, p: usize, k: usize) -> &[f64] {
        let nn = self.n * self.n;
        let off = (p * self.grid.n_steps() + k) * nn;
        &self.z[off..off + nn]
    }

    /// Mean and sample standard deviation of each component of `Y_k`.
    pub fn y_stats(&self, k: usize) -> (Vec<f64>, Vec<f64>) {
        let np = self.n_paths() as f64;
        let mut mean = vec![0.0; self.n];
        for p in 0..self.n_paths() {
            for (m, v) in mean.iter_mut().zip(self.y(p, k)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= np);
        let mut var = vec![0.0; self.n];
        for p in 0..self.n_paths() {
            for ((s, v), m) in var.iter_mut().zip(self.y(p, k)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let denom = (np - 1.0).max(1.0);
        (mean, var.into_iter().map(|s| (s / denom).sqrt()).collect())
    }

    /// Mean Frobenius norm of `Z_k`, for `k < N`.
    pub fn z_frob_mean(&self, k: usize) -> f64 {
        (0..self.n_paths()).map(|p| self.z(p, k).iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>()
            / self.n_paths() as f64
    }

    pub fn max_junction_gap(&self) -> Option<f64> {
        self.junctions.iter().map(|j| j.rms).reduce(f64::max)
    }
}

/// Forward sweep: on each block, a local solve from the paths built so far
/// with `u` at the block's right end as terminal condition, started from the
/// fitted field itself. Noise for block `i`
/// is drawn from `derive_seed(cfg.seed, ·, i)`, so two problems solved with the
/// same configuration and block layout share their Brownian increments.
pub fn solve_global(p: &FBSDEProblem, field: &DecouplingField, cfg: &GlobalConfig) -> Result<GlobalSolution, GlobalError> {
    check_config(cfg)?;
    let grid = field.grid;
    let (n, nn) = (p.n, p.n * p.n);
    let n_steps = grid.n_steps();
    let n_paths = cfg.n_paths;
    let mut y = vec![0.0; n_paths * (n_steps + 1) * n];
    let mut z = vec![0.0; n_paths * n_steps * nn];
    let mut prefix = PathEnsemble::constant_start(grid, &p.x0, 1)?;
    let mut junctions = Vec::new();
    let mut reports = Vec::with_capacity(field.blocks.len());
    let last = field.blocks.len() - 1;
    for (i, block) in field.blocks.iter().enumerate() {
        let (k_a, k_b) = (block.k_a, block.k_b);
        let m = k_b - k_a;
        let (t_a, t_b) = (grid.time(k_a), grid.time(k_b));
        let noise = generate_brownian(grid.sub(k_a, k_b)?, n_paths, n, derive_seed(cfg.seed, TAG_SOLVE, i as u64));
        let local_cfg = LocalConfig { check: Some(ContractionCheck::SmallTime { k_terminal: block.k_terminal }), ..cfg.local.clone() };
        let terminal = |x: &PathView, o: &mut [f64]| {
            if i == last {
                p.terminal(x, o);
            } else {
                field.map.with_features(x, |feats| field.blocks[i + 1].y_estimators[0].predict(feats, o));
            }
        };
        let start = BlockCandidate { field, block: i };
        let sol = local_solve_with_field(p, &prefix, &terminal, &noise, &local_cfg, &start).map_err(local_err(t_a, t_b))?;
        let gamma = best_gamma(p.lipschitz.k0, block.k_terminal, p.lipschitz.grad_z_sigma, t_b - t_a).gamma;
        reports.push(block_report(&sol, k_a, k_b, block.k_terminal, Some(gamma)));

        let bw = &sol.backward;
        if i > 0 {
            // Left limit: the previous block's terminal value u(t_i, X); right: this block's Y at t_i.
            let gaps: Vec<f64> = (0..n_paths)
                .map(|path| {
                    let left = &y[(path * (n_steps + 1) + k_a) * n..(path * (n_steps + 1) + k_a + 1) * n];
                    left.iter().zip(bw.y(path, 0)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
                })
                .collect();
            junctions.push(junction_stats(k_a, t_a, &gaps));
        }
        y.par_chunks_mut((n_steps + 1) * n).enumerate().for_each(|(path, row)| {
            for j in 0..=m {
                row[(k_a + j) * n..(k_a + j + 1) * n].copy_from_slice(bw.y(path, j));
            }
        });
        z.par_chunks_mut(n_steps * nn).enumerate().for_each(|(path, row)| {
            for j in 0..m {
                row[(k_a + j) * nn..(k_a + j + 1) * nn].copy_from_slice(bw.z(path, j));
            }
        });
        prefix = sol.ensemble;
    }
    Ok(GlobalSolution { grid, ensemble: prefix, n, y, z, junctions, blocks: reports, seed: cfg.seed })
}

fn junction_stats(index: usize, t: f64, gaps: &[f64]) -> JunctionGap {
    let np = gaps.len() as f64;
    let mean_abs = gaps.iter().sum::<f64>() / np;
    let rms = (gaps.iter().map(|g| g * g).sum::<f64>() / np).sqrt();
    let var = gaps.iter().map(|g| (g - mean_abs).powi(2)).sum::<f64>() / (np - 1.0).max(1.0);
    JunctionGap { index, t, rms, mean_abs, std_err: (var / np).sqrt() }
}

/// Build the field and solve forward with one configuration.
pub fn solve(p: &FBSDEProblem, horizon: f64, cfg: &GlobalConfig) -> Result<(DecouplingField, GlobalSolution), GlobalError> {
    let field = build_decoupling_field(p, horizon, cfg)?;
    let sol = solve_global(p, &field, cfg)?;
    Ok((field, sol))
}

/// Per-index means of `‖X‖²_{2,t_k}`, `|Y_k|²` and `Σ_{j≥k}|Z_j|² dt`, given
/// pointwise squared norms per `(path, k)`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct NormProfile {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

impl NormProfile {
    /// Index and value of the largest total.
    pub fn sup(&self) -> (usize, f64) {
        (0..self.x.len()).map(|k| (k, self.x[k] + self.y[k] + self.z[k])).fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a })
    }
}

pub(crate) fn norm_profile<X, Y, Z>(grid: TimeGrid, n_paths: usize, x_sq: X, y_sq: Y, z_sq: Z) -> NormProfile
where
    X: Fn(usize, usize) -> f64 + Sync,
    Y: Fn(usize, usize) -> f64 + Sync,
    Z: Fn(usize, usize) -> f64 + Sync,
{
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let width = n_steps + 1;
    let chunks: Vec<Vec<f64>> = (0..n_paths.div_ceil(1024))
        .into_par_iter()
        .map(|c| {
            let mut part = vec![0.0; 3 * width];
            for path in c * 1024..((c + 1) * 1024).min(n_paths) {
                let mut running = 0.0;
                for k in 0..=n_steps {
                    let x = x_sq(path, k);
                    part[k] += running + x;
                    running += x * dt;
                    part[width + k] += y_sq(path, k);
                }
                let mut tail = 0.0;
                for k in (0..n_steps).rev() {
                    tail += z_sq(path, k) * dt;
                    part[2 * width + k] += tail;
                }
            }
            part
        })
        .collect();
    let mut sums = vec![0.0; 3 * width];
    for part in chunks {
        for (a, b) in sums.iter_mut().zip(part) {
            *a += b;
        }
    }
    let np = n_paths as f64;
    let mean = |r: std::ops::Range<usize>| sums[r].iter().map(|s| s / np).collect::<Vec<f64>>();
    NormProfile { x: mean(0..width), y: mean(width..2 * width), z: mean(2 * width..3 * width) }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AprioriReport {
    /// `max_k E[‖X‖²_{2,t_k} + |Y_k|² + Σ_{j≥k}|Z_j|² dt]`.
    pub lhs: f64,
    pub x0_sq: f64,
    pub g0_sq: f64,
    pub i0_sq: f64,
    pub rhs: f64,
    /// `lhs / rhs`; `None` when both vanish.
    pub ratio: Option<f64>,
}

/// Compares the solution's size with the data norm `|x|² + |g⁰|² + I₀²`, where
/// `ξ⁰` is the coefficient at the zero path and zero `(y, z)`.
pub fn apriori_bound_check(sol: &GlobalSolution, p: &FBSDEProblem) -> AprioriReport {
    let grid = sol.grid;
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let (d, n) = (p.d, p.n);
    let n_paths = sol.n_paths();
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let lhs = norm_profile(
        grid,
        n_paths,
        |path, k| sq(&sol.ensemble.path_values(path)[k * d..(k + 1) * d]),
        |path, k| sq(sol.y(path, k)),
        |path, k| sq(sol.z(path, k)),
    )
    .sup()
    .1;

    let zeros = vec![0.0; (n_steps + 1) * d];
    let (y0, z0) = (vec![0.0; n], vec![0.0; n * n]);
    let mut g0 = vec![0.0; n];
    p.terminal(&PathView::new(grid.t0(), dt, d, &zeros), &mut g0);
    let g0_sq: f64 = g0.iter().map(|v| v * v).sum();
    let (mut fb, mut s2) = (0.0, 0.0);
    let (mut b, mut s, mut f) = (vec![0.0; d], vec![0.0; d * n], vec![0.0; n]);
    for k in 0..n_steps {
        let view = PathView::new(grid.t0(), dt, d, &zeros[..(k + 1) * d]);
        p.drift(&view, &y0, &z0, &mut b);
        p.diffusion(&view, &y0, &z0, &mut s);
        p.driver(&view, &y0, &z0, &mut f);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        fb += (norm(&f) + norm(&b)) * dt;
        s2 += norm(&s).powi(2) * dt;
    }
    let x0_sq: f64 = p.x0.iter().map(|v| v * v).sum();
    let i0_sq = fb * fb + s2;
    let rhs = x0_sq + g0_sq + i0_sq;
    let ratio = if rhs > 0.0 {
        Some(lhs / rhs)
    } else if lhs == 0.0 {
        None
    } else {
        Some(f64::INFINITY)
    };
    AprioriReport { lhs, x0_sq, g0_sq, i0_sq, rhs, ratio }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalLipschitz {
    pub index: usize,
    pub max_quotient: f64,
    pub k_bound: f64,
    pub warning: Option<String>,
}

/// Largest `|u(t_k, x) − u(t_k, x')| / ‖x − x'‖_{2,t_k}` over pairs of
/// training-style prefixes, compared with the schedule's bound.
pub fn empirical_lipschitz(field: &DecouplingField, k: usize, pairs: usize, seed: u64) -> Result<EmpiricalLipschitz, GlobalError> {
    let p = &field.problem;
    let grid = field.grid;
    let (d, n) = (p.d, p.n);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_LIPSCHITZ, k as u64));
    let initial: Vec<f64> = (0..2 * pairs * d)
        .map(|j| {
            let e: f64 = StandardNormal.sample(&mut rng);
            p.x0[j % d] + e
        })
        .collect();
    let mut ens = PathEnsemble::from_initial(grid, d, initial)?;
    if k > 0 {
        let noise = generate_brownian(grid.sub(0, k)?, 2 * pairs, n, derive_seed(seed, TAG_LIPSCHITZ, u64::MAX - k as u64));
        ens = simulate_forward(p, BackwardCandidate::Zero, &ens, &noise)?;
    }
    let mut best: f64 = 0.0;
    let (mut u1, mut u2) = (vec![0.0; n], vec![0.0; n]);
    for pair in 0..pairs {
        let (a, b) = (ens.view(2 * pair, k), ens.view(2 * pair + 1, k));
        eval_field(field, k, &a, &mut u1)?;
        eval_field(field, k, &b, &mut u2)?;
        let diff: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect();
        let dist = PathView::new(grid.t0(), grid.dt(), d, &diff).norm_sq().sqrt();
        if dist > 0.0 {
            let du = u1.iter().zip(&u2).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            best = best.max(du / dist);
        }
    }
    let k_bound = field.k_bound(k);
    let warning = (best > k_bound).then(|| format!("empirical quotient {best} exceeds the bound {k_bound} at index {k}"));
    Ok(EmpiricalLipschitz { index: k, max_quotient: best, k_bound, warning })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde_engine::solve_backward;
    use crate::problem::registry::{self, RegistryParams};
    use crate::problem::{FnCoefficients, LipschitzData, ProblemClass};
    use std::sync::Arc;

    fn small_cfg(n_paths: usize, steps: usize) -> GlobalConfig {
        GlobalConfig { n_paths, steps_per_interval: steps, seed: 7, ..Default::default() }
    }

    #[test]
    fn fromm_imkeller_field_and_solution() {
        let p = registry::fromm_imkeller(&RegistryParams { horizon: 0.5, ..Default::default() }).unwrap();
        let cfg = small_cfg(10_000, 20);
        let (field, sol) = solve(&p, 0.5, &cfg).unwrap();
        assert!(field.coarsened);
        let n_steps = field.grid.n_steps();
        // u(0, x) = 2x and u(0.25, x) = x/0.75 on constant prefixes.
        let x = vec![1.0; n_steps + 1];
        let mut u = [0.0];
        eval_field(&field, 0, &PathView::new(0.0, field.grid.dt(), 1, &x[..1]), &mut u).unwrap();
        assert!((u[0] - 2.0).abs() < 0.04, "{}", u[0]);
        let k = n_steps / 2;
        eval_field(&field, k, &PathView::new(0.0, field.grid.dt(), 1, &x[..k + 1]), &mut u).unwrap();
        assert!((u[0] / (1.0 / 0.75) - 1.0).abs() < 0.02, "{}", u[0]);
        let (mean, _) = sol.y_stats(0);
        assert!((mean[0] - 2.0).abs() < 0.04, "{}", mean[0]);
        let z_rmse = ((0..n_steps).map(|k| sol.z_frob_mean(k).powi(2)).sum::<f64>() / n_steps as f64).sqrt();
        assert!(z_rmse < 0.05);
        // Terminal exactness.
        for path in (0..sol.n_paths()).step_by(101) {
            let mut g = [0.0];
            p.terminal(&sol.ensemble.view(path, n_steps), &mut g);
            assert_eq!(sol.y(path, n_steps)[0], g[0]);
        }
    }

    #[test]
    fn terminal_passthrough() {
        let p = registry::integral_terminal(&RegistryParams::default()).unwrap();
        let cfg = small_cfg(2_000, 10);
        let field = build_decoupling_field(&p, 1.0, &cfg).unwrap();
        let vals: Vec<f64> = (0..=10).map(|k| (k as f64).sin()).collect();
        let view = PathView::new(0.0, 0.1, 1, &vals);
        let (mut u, mut g) = ([0.0], [0.0]);
        eval_field(&field, 10, &view, &mut u).unwrap();
        p.terminal(&view, &mut g);
        assert_eq!(u, g);
        assert!(matches!(eval_field(&field, 11, &view, &mut u), Err(GlobalError::Index { .. })));
    }

    #[test]
    fn decoupled_single_block_matches_standalone_regression() {
        let p = registry::decoupled_brownian(&RegistryParams::default()).unwrap();
        let cfg = small_cfg(3_000, 10);
        let field = build_decoupling_field(&p, 1.0, &cfg).unwrap();
        assert_eq!(field.n_blocks(), 1);
        // Rebuild the training ensemble and run the backward pass directly.
        let grid = field.grid;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(7, TAG_TRAIN_INIT, 0));
        let initial: Vec<f64> = (0..3_000)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                e
            })
            .collect();
        let start = PathEnsemble::from_initial(grid, 1, initial).unwrap();
        let noise = generate_brownian(grid, 3_000, 1, derive_seed(7, TAG_TRAIN_NOISE, 0));
        let ens = simulate_forward(&p, BackwardCandidate::Zero, &start, &noise).unwrap();
        let terminal: Vec<f64> = (0..3_000).map(|i| ens.state(i, 10)[0]).collect();
        let direct = solve_backward(&p, &ens, &terminal, &noise, &cfg.local.regression).unwrap();
        for k in 0..10 {
            let a = field.y_estimator(k).unwrap();
            let b = &direct.y_estimators[k];
            for (x, y) in a.coef.iter().zip(&b.coef) {
                assert!((x - y).abs() <= 1e-12);
            }
            assert!((a.intercept[0] - b.intercept[0]).abs() <= 1e-12);
        }
    }

    #[test]
    fn integral_terminal_field_matches_closed_form() {
        let p = registry::integral_terminal(&RegistryParams::default()).unwrap();
        let cfg = small_cfg(20_000, 20);
        let (field, sol) = solve(&p, 1.0, &cfg).unwrap();
        let dt = field.grid.dt();
        let (mut se, mut norm) = (0.0, 0.0);
        let mut u = [0.0];
        for path in (0..sol.n_paths()).step_by(7) {
            let mut integral = 0.0;
            for k in 0..20 {
                let view = sol.ensemble.view(path, k);
                eval_field(&field, k, &view, &mut u).unwrap();
                let x = view.current()[0];
                let exact = (2.0 - field.grid.time(k)) * x + integral;
                se += (u[0] - exact).powi(2);
                norm += exact * exact;
                integral += x * dt;
            }
        }
        assert!((se / norm).sqrt() < 0.05);
    }

    #[test]
    fn frozen_system_is_constant() {
        let coeffs = FnCoefficients {
            terminal: Some(Box::new(|x: &PathView, o: &mut [f64]| o[0] = x.current()[0])),
            ..Default::default()
        };
        let l = LipschitzData::new(0.0, 1.0, 0.0).unwrap();
        let p = FBSDEProblem::new("frozen", 1, 1, vec![0.7], l, ProblemClass::Decoupled, Arc::new(coeffs)).unwrap();
        let mut cfg = GlobalConfig { force_blocks: Some(3), ..small_cfg(500, 5) };
        // Without ridge shrinkage the linear field u(x) = x is fitted exactly.
        cfg.local.regression.ridge_lambda = Some(0.0);
        let (_, sol) = solve(&p, 1.0, &cfg).unwrap();
        for path in (0..500).step_by(37) {
            for k in 0..=15 {
                assert_eq!(sol.ensemble.state(path, k)[0], 0.7);
                assert!((sol.y(path, k)[0] - 0.7).abs() < 1e-9, "k={k} y={}", sol.y(path, k)[0]);
                if k < 15 {
                    assert!(sol.z(path, k)[0].abs() < 1e-9);
                }
            }
        }
        assert!(sol.max_junction_gap().unwrap() < 1e-9);
    }

    #[test]
    fn junction_gaps_shrink_with_paths() {
        let p = registry::decoupled_brownian(&RegistryParams::default()).unwrap();
        let gaps: Vec<f64> = [2_000usize, 8_000, 32_000]
            .iter()
            .map(|np| {
                let cfg = GlobalConfig { force_blocks: Some(4), ..small_cfg(*np, 5) };
                solve(&p, 1.0, &cfg).unwrap().1.max_junction_gap().unwrap()
            })
            .collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }

    #[test]
    fn field_agrees_with_solution_along_paths() {
        let p = registry::decoupled_brownian(&RegistryParams { x0: Some(0.3), ..Default::default() }).unwrap();
        let cfg = GlobalConfig { force_blocks: Some(2), ..small_cfg(8_000, 5) };
        let (field, sol) = solve(&p, 1.0, &cfg).unwrap();
        let mut u = [0.0];
        for k in 1..10 {
            let diffs: Vec<f64> = (0..sol.n_paths())
                .map(|path| {
                    eval_field(&field, k, &sol.ensemble.view(path, k), &mut u).unwrap();
                    sol.y(path, k)[0] - u[0]
                })
                .collect();
            let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
            // Both fits regress targets with variance at most Var(X_T) ≤ 2 (training
            // spread plus Brownian noise), so each intercept error is of order √(2/N).
            let se = (2.0 / sol.n_paths() as f64).sqrt();
            assert!(mean.abs() < 4.0 * se, "k={k} mean={mean} se={se}");
        }
    }

    #[test]
    fn seeds_agree_on_initial_value() {
        let p = registry::decoupled_brownian(&RegistryParams { x0: Some(0.5), ..Default::default() }).unwrap();
        let y0 = |seed| {
            let cfg = GlobalConfig { seed, ..small_cfg(5_000, 10) };
            let (_, sol) = solve(&p, 1.0, &cfg).unwrap();
            let (m, _) = sol.y_stats(10);
            let (_, sd_t) = sol.y_stats(10);
            (sol.y_stats(0).0[0], sd_t[0] / (5_000f64).sqrt(), m[0])
        };
        let (a, sa, _) = y0(1);
        let (b, sb, _) = y0(2);
        assert!((a - b).abs() < 3.0 * (sa * sa + sb * sb).sqrt());
    }

    #[test]
    fn infeasible_plans_are_reported() {
        let p = registry::fromm_imkeller(&RegistryParams::default()).unwrap();
        let cfg = GlobalConfig { search: SearchConfig { max_intervals: 5_000, ..Default::default() }, ..small_cfg(100, 5) };
        assert!(matches!(build_decoupling_field(&p, 1.0, &cfg), Err(GlobalError::Infeasible { .. })));
        let p = registry::delarue(&RegistryParams { k: Some(1.0), ..Default::default() }).unwrap();
        match build_decoupling_field(&p, 0.1, &cfg) {
            Err(GlobalError::Infeasible { reason, .. }) => assert!(reason.contains("K1·|∇zσ| = 1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn apriori_cases() {
        let p = registry::zero_problem(1, 1).unwrap();
        let cfg = small_cfg(500, 5);
        let (_, sol) = solve(&p, 1.0, &cfg).unwrap();
        let r = apriori_bound_check(&sol, &p);
        assert_eq!((r.lhs, r.rhs, r.ratio), (0.0, 0.0, None));

        let p = registry::decoupled_brownian(&RegistryParams::default()).unwrap();
        let ratios: Vec<f64> = (1..=3)
            .map(|seed| {
                let cfg = GlobalConfig { seed, ..small_cfg(4_000, 10) };
                let (_, sol) = solve(&p, 1.0, &cfg).unwrap();
                let r = apriori_bound_check(&sol, &p);
                assert!((r.i0_sq - 1.0).abs() < 1e-12);
                r.ratio.unwrap()
            })
            .collect();
        let mean = ratios.iter().sum::<f64>() / 3.0;
        assert!(ratios.iter().all(|r| (r / mean - 1.0).abs() < 0.2), "{ratios:?}");

        // Doubling x0 keeps the ratio bounded.
        let base = registry::decoupled_brownian(&RegistryParams { x0: Some(1.0), ..Default::default() }).unwrap();
        let double = registry::decoupled_brownian(&RegistryParams { x0: Some(2.0), ..Default::default() }).unwrap();
        let cfg = small_cfg(4_000, 10);
        let r1 = apriori_bound_check(&solve(&base, 1.0, &cfg).unwrap().1, &base);
        let r2 = apriori_bound_check(&solve(&double, 1.0, &cfg).unwrap().1, &double);
        assert!(r2.lhs <= 4.0 * r1.lhs * (r1.ratio.unwrap().max(1.0)));
        assert!(r2.ratio.unwrap().is_finite());
    }

    #[test]
    fn empirical_lipschitz_within_schedule() {
        let p = registry::fromm_imkeller(&RegistryParams { horizon: 0.5, ..Default::default() }).unwrap();
        let cfg = small_cfg(4_000, 10);
        let field = build_decoupling_field(&p, 0.5, &cfg).unwrap();
        let r = empirical_lipschitz(&field, 0, 200, 3).unwrap();
        // u(0, x) = 2x: the quotient is at most 2 (the path norm dominates |Δx_0|).
        assert!(r.max_quotient <= 2.0 + 0.05, "{r:?}");
        assert!(r.warning.is_none(), "{r:?}");
    }
}
