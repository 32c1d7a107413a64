//! Local solver on a short interval: the Picard map `(y, z) ↦ (Y, Z)` iterated
//! to a fixed point, and the closed-form contraction constants that certify it.

use serde::Serialize;
use thiserror::Error;

use crate::bsde_engine::{solve_backward_into, BackwardSolution, BsdeError, RegressionConfig};
use crate::path_space::{PathEnsemble, PathError, PathView};
use crate::problem::{small_time_condition, FBSDEProblem, LipschitzData};
use crate::sde_engine::{simulate_forward, simulate_into, BackwardCandidate, BrownianBatch, CandidateField, SimulationError};

/// Ratios are only formed between residuals above this level; below it the
/// residual is round-off and its ratio meaningless.
const RATIO_FLOOR: f64 = 1e-26;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionConstants {
    pub eps: f64,
    pub t_loc: f64,
    pub c_eps: f64,
    pub c_tilde_eps: f64,
    pub c_y: f64,
    pub c_z: f64,
    pub gamma: f64,
}

/// Constants of the Picard map on an interval of length `t_loc` whose
/// terminal condition is `k1`-Lipschitz.
pub fn contraction_constants_for(k0: f64, k1: f64, grad_z_sigma: f64, eps: f64, t_loc: f64) -> ContractionConstants {
    let t = t_loc;
    let c_eps = 2.0 * k0 * k0 * (1.0 + k0 / eps) * (1.0 + t) + k0 * (3.0 + t + 1.0 / eps);
    let c_tilde_eps = k0 * (2.0 + 1.0 / eps);
    let e = (c_eps * t).exp();
    let gz2 = grad_z_sigma * grad_z_sigma;
    let c_y = (t + 1.0) * k1 * k1 * e * c_eps + k0 + t * (t + 1.0) * k0 * e * c_eps;
    let c_z = (t + 1.0) * k1 * k1 * e * (2.0 * k0 * eps + gz2) + k0 * (eps + t * (t + 1.0) * e * (3.0 * k0 * eps + gz2));
    let growth = c_tilde_eps * t * (c_tilde_eps * t).exp() + 1.0;
    let gamma = t * growth * c_y + growth * c_z;
    ContractionConstants { eps, t_loc, c_eps, c_tilde_eps, c_y, c_z, gamma }
}

pub fn contraction_constants(l: &LipschitzData, eps: f64, t_loc: f64) -> ContractionConstants {
    contraction_constants_for(l.k0, l.k1, l.grad_z_sigma, eps, t_loc)
}

/// `γ` as the interval length shrinks to zero.
pub fn gamma_limit(k0: f64, k1: f64, grad_z_sigma: f64, eps: f64) -> f64 {
    k1 * k1 * (2.0 * k0 * eps + grad_z_sigma * grad_z_sigma) + k0 * eps
}

/// Log-spaced `ε` grid shared by the solver's diagnostics and the planner.
pub fn eps_grid(eps_min: f64, eps_max: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![eps_min];
    }
    let (a, b) = (eps_min.ln(), eps_max.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Smallest `γ` over the default `ε` grid for a fixed interval length, refined
/// by golden-section search in `ln ε` around the best grid point.
pub fn best_gamma(k0: f64, k1: f64, grad_z_sigma: f64, t_loc: f64) -> ContractionConstants {
    let grid = eps_grid(1e-4, 10.0, 60);
    let gamma = |eps: f64| contraction_constants_for(k0, k1, grad_z_sigma, eps, t_loc).gamma;
    let (i_best, _) = grid
        .iter()
        .map(|e| gamma(*e))
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, g)| if g < acc.1 { (i, g) } else { acc });
    let lo = grid[i_best.saturating_sub(1)].ln();
    let hi = grid[(i_best + 1).min(grid.len() - 1)].ln();
    let eps = golden_min(|u| gamma(u.exp()), lo, hi, 60).exp();
    let refined = contraction_constants_for(k0, k1, grad_z_sigma, eps, t_loc);
    let at_grid = contraction_constants_for(k0, k1, grad_z_sigma, grid[i_best], t_loc);
    if refined.gamma <= at_grid.gamma {
        refined
    } else {
        at_grid
    }
}

pub(crate) fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PicardError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("no fixed point within {iterations} iterations (last residual {last:e})")]
    NotConverged { iterations: usize, last: f64, residual_history: Vec<f64> },
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Backward(#[from] BsdeError),
    #[error(transparent)]
    Path(#[from] PathError),
}

/// Which contraction precondition `local_solve` enforces before iterating.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ContractionCheck {
    /// Small-time condition `K·|∇zσ| < 1` with the given terminal Lipschitz constant;
    /// the best theoretical `γ` is reported but not required to be below 1.
    SmallTime { k_terminal: f64 },
    /// Additionally require `γ(ε, t_b − t_a) < 1`, at `eps` if given or at the best `ε`.
    Strict { k_terminal: f64, eps: Option<f64> },
    /// Skip the check; used only when the caller has already verified it.
    Unchecked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalConfig {
    /// Stop once the squared iterate distance falls to this level.
    pub tol_fixed_point: f64,
    pub max_iters: usize,
    pub regression: RegressionConfig,
    /// `None` takes the problem's own `K1` with [`ContractionCheck::SmallTime`].
    pub check: Option<ContractionCheck>,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self { tol_fixed_point: 1e-6, max_iters: 50, regression: RegressionConfig::default(), check: None }
    }
}

#[derive(Debug, Clone)]
pub struct LocalSolution {
    pub t_a: f64,
    pub t_b: f64,
    /// Forward paths including the prefix before `t_a`.
    pub ensemble: PathEnsemble,
    pub backward: BackwardSolution,
    pub iterations: usize,
    /// Squared distance between consecutive iterates; the first entry is the
    /// distance from the initial candidate.
    pub residual_history: Vec<f64>,
    pub converged: bool,
    /// Largest ratio of consecutive residuals from the second iteration on.
    pub contraction_estimate: Option<f64>,
    /// Smallest theoretical `γ` over `ε` for this interval, if it was evaluated.
    pub gamma_theory: Option<f64>,
}

/// Terminal functional `ξ(X_{·∧t_b})` of a local problem.
pub type TerminalMap<'a> = &'a (dyn Fn(&PathView, &mut [f64]) + Sync);

pub fn local_solve(
    p: &FBSDEProblem,
    prefix: &PathEnsemble,
    terminal: TerminalMap,
    noise: &BrownianBatch,
    cfg: &LocalConfig,
) -> Result<LocalSolution, PicardError> {
    local_solve_from(p, prefix, terminal, noise, cfg, None)
}

/// As [`local_solve`], starting from `initial` instead of `(0, 0)`.
pub fn local_solve_from(
    p: &FBSDEProblem,
    prefix: &PathEnsemble,
    terminal: TerminalMap,
    noise: &BrownianBatch,
    cfg: &LocalConfig,
    initial: Option<&BackwardSolution>,
) -> Result<LocalSolution, PicardError> {
    let start = match initial {
        Some(sol) => Start::Stored(sol),
        None => Start::Zero,
    };
    picard(p, prefix, terminal, noise, cfg, start)
}

/// As [`local_solve`], with the first iterate read off `field` along the paths
/// it drives. A good approximation of the decoupling field leaves only a
/// couple of iterations to do.
pub fn local_solve_with_field(
    p: &FBSDEProblem,
    prefix: &PathEnsemble,
    terminal: TerminalMap,
    noise: &BrownianBatch,
    cfg: &LocalConfig,
    field: &dyn CandidateField,
) -> Result<LocalSolution, PicardError> {
    picard(p, prefix, terminal, noise, cfg, Start::Field(field))
}

/// Candidate `y = ξ(x_{·∧t})`, `z = 0`: the interval's terminal map applied to
/// the current prefix.
pub struct FrozenTerminal<'a>(pub TerminalMap<'a>);

impl CandidateField for FrozenTerminal<'_> {
    fn eval(&self, path: &PathView, y: &mut [f64], z: &mut [f64]) {
        (self.0)(path, y);
        z.iter_mut().for_each(|v| *v = 0.0);
    }
}

enum Start<'a> {
    Zero,
    Stored(&'a BackwardSolution),
    Field(&'a dyn CandidateField),
}

fn picard(
    p: &FBSDEProblem,
    prefix: &PathEnsemble,
    terminal: TerminalMap,
    noise: &BrownianBatch,
    cfg: &LocalConfig,
    start: Start,
) -> Result<LocalSolution, PicardError> {
    let k_a = prefix.last_index();
    let m = noise.grid().n_steps();
    let grid = *prefix.grid();
    let (t_a, t_b) = (grid.time(k_a), grid.time(k_a + m));
    let gz = p.lipschitz.grad_z_sigma;
    let check = cfg.check.unwrap_or(ContractionCheck::SmallTime { k_terminal: p.lipschitz.k1 });
    let gamma_theory = match check {
        ContractionCheck::Unchecked => None,
        ContractionCheck::SmallTime { k_terminal } | ContractionCheck::Strict { k_terminal, .. } => {
            let st = small_time_condition(k_terminal, gz);
            if !st.pass {
                return Err(PicardError::Precondition(format!(
                    "K·|∇zσ| = {} (must be < 1)",
                    k_terminal * gz
                )));
            }
            let gamma = match check {
                ContractionCheck::Strict { eps: Some(eps), .. } => {
                    contraction_constants_for(p.lipschitz.k0, k_terminal, gz, eps, t_b - t_a).gamma
                }
                _ => best_gamma(p.lipschitz.k0, k_terminal, gz, t_b - t_a).gamma,
            };
            if matches!(check, ContractionCheck::Strict { .. }) && gamma >= 1.0 {
                return Err(PicardError::Precondition(format!(
                    "contraction factor {gamma:e} ≥ 1 on an interval of length {}",
                    t_b - t_a
                )));
            }
            Some(gamma)
        }
    };
    if cfg.max_iters == 0 {
        return Err(PicardError::Precondition("max_iters must be positive".into()));
    }
    let (mut ens, mut previous) = match start {
        Start::Zero => (
            simulate_forward(p, BackwardCandidate::Zero, prefix, noise)?,
            BackwardSolution::zeros(noise.n_paths(), m, p.n, k_a),
        ),
        Start::Stored(sol) => (simulate_forward(p, BackwardCandidate::Stored(sol), prefix, noise)?, sol.clone()),
        Start::Field(field) => {
            let ens = simulate_forward(p, BackwardCandidate::Field(field), prefix, noise)?;
            let first = field_values(&ens, k_a, m, p.n, field, terminal);
            (ens, first)
        }
    };
    let dt = grid.dt();
    let mut history = Vec::new();
    let mut spare: Option<BackwardSolution> = None;
    loop {
        if !history.is_empty() {
            simulate_into(p, BackwardCandidate::Stored(&previous), &mut ens, k_a, noise)?;
        }
        let terminal_values = terminal_values(&ens, p.n, terminal);
        let current = solve_backward_into(p, &ens, &terminal_values, noise, &cfg.regression, spare.take())?;
        let r = current.distance_sq(&previous, dt);
        if !r.is_finite() {
            return Err(BsdeError::NonFinite(k_a).into());
        }
        history.push(r);
        spare = Some(std::mem::replace(&mut previous, current));
        if r <= cfg.tol_fixed_point {
            break;
        }
        if history.len() >= cfg.max_iters {
            return Err(PicardError::NotConverged { iterations: history.len(), last: r, residual_history: history });
        }
    }
    let contraction_estimate = contraction_ratio(&history);
    Ok(LocalSolution {
        t_a,
        t_b,
        ensemble: ens,
        backward: previous,
        iterations: history.len(),
        residual_history: history,
        converged: true,
        contraction_estimate,
        gamma_theory,
    })
}

/// `(Y, Z)` read off `field` along `ens` on `k_a..k_a+m`, with `Y` at the end
/// taken from the terminal map.
fn field_values(ens: &PathEnsemble, k_a: usize, m: usize, n: usize, field: &dyn CandidateField, terminal: TerminalMap) -> BackwardSolution {
    use rayon::prelude::*;
    let n_paths = ens.n_paths();
    let nn = n * n;
    let mut y = vec![0.0; (m + 1) * n_paths * n];
    let mut z = vec![0.0; m * n_paths * nn];
    let (y_steps, y_last) = y.split_at_mut(m * n_paths * n);
    y_steps.par_chunks_mut(n_paths * n).zip(z.par_chunks_mut(n_paths * nn)).enumerate().for_each(|(j, (ys, zs))| {
        for path in 0..n_paths {
            field.eval(&ens.view(path, k_a + j), &mut ys[path * n..(path + 1) * n], &mut zs[path * nn..(path + 1) * nn]);
        }
    });
    y_last.copy_from_slice(&terminal_values(ens, n, terminal));
    BackwardSolution::from_values(n_paths, m, n, k_a, y, z)
}

pub(crate) fn terminal_values(ens: &PathEnsemble, n: usize, terminal: TerminalMap) -> Vec<f64> {
    use rayon::prelude::*;
    let k = ens.last_index();
    let mut out = vec![0.0; ens.n_paths() * n];
    out.par_chunks_mut(n).enumerate().for_each(|(path, o)| terminal(&ens.view(path, k), o));
    out
}

/// `max r_{m+1}/r_m` over consecutive residuals from the second on, skipping
/// pairs whose denominator is at round-off level.
pub fn contraction_ratio(history: &[f64]) -> Option<f64> {
    history
        .windows(2)
        .skip(1)
        .filter(|w| w[0] > RATIO_FLOOR)
        .map(|w| w[1] / w[0])
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path_space::TimeGrid;
    use crate::problem::registry::{self, RegistryParams};
    use crate::sde_engine::generate_brownian;
    use proptest::prelude::*;

    /// Independent transcription of the closed forms.
    fn gamma_oracle(k0: f64, k1: f64, gz: f64, e: f64, t: f64) -> f64 {
        let ce = 2.0 * k0.powi(2) * (1.0 + k0 / e) * (1.0 + t) + k0 * (3.0 + t + e.recip());
        let ct = k0 * (2.0 + e.recip());
        let ex = f64::exp(ce * t);
        let cy = (t + 1.0) * k1.powi(2) * ex * ce + k0 + t * (t + 1.0) * k0 * ex * ce;
        let cz = (t + 1.0) * k1.powi(2) * ex * (2.0 * k0 * e + gz.powi(2))
            + k0 * (e + t * (t + 1.0) * ex * (3.0 * k0 * e + gz.powi(2)));
        t * (ct * t * f64::exp(ct * t) + 1.0) * cy + (ct * t * f64::exp(ct * t) + 1.0) * cz
    }

    #[test]
    fn gamma_matches_independent_evaluation() {
        let c = contraction_constants_for(1.0, 1.0, 0.0, 0.1, 0.01);
        let oracle = gamma_oracle(1.0, 1.0, 0.0, 0.1, 0.01);
        assert!((c.gamma - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
    }

    #[test]
    fn gamma_limit_at_tiny_interval() {
        for (k0, k1, gz, eps) in [(1.0, 1.0, 0.0, 0.1), (2.0, 0.5, 1.0, 0.01), (0.3, 2.0, 0.2, 1.0)] {
            let g = contraction_constants_for(k0, k1, gz, eps, 1e-12).gamma;
            assert!((g - gamma_limit(k0, k1, gz, eps)).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_k0_gives_zero_constants() {
        let c = contraction_constants_for(0.0, 3.0, 0.0, 0.5, 0.7);
        assert_eq!((c.c_eps, c.c_tilde_eps, c.c_y, c.c_z, c.gamma), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    proptest! {
        #[test]
        fn gamma_increases_with_interval_length(k0 in 0.1f64..3.0, k1 in 0.1f64..3.0, eps in 1e-3f64..5.0, t in 1e-4f64..0.5) {
            let a = contraction_constants_for(k0, k1, 0.0, eps, t).gamma;
            let b = contraction_constants_for(k0, k1, 0.0, eps, 1.5 * t).gamma;
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn ratio_skips_first_and_round_off() {
        assert_eq!(contraction_ratio(&[1.0, 0.5]), None);
        assert_eq!(contraction_ratio(&[1.0, 0.5, 0.1, 0.05]), Some(0.5));
        assert_eq!(contraction_ratio(&[1.0, 1e-30, 1e-31]), None);
    }

    fn prefix_at(p: &FBSDEProblem, grid: TimeGrid, k_a: usize) -> PathEnsemble {
        let start = PathEnsemble::constant_start(grid, &p.x0, 1).unwrap();
        if k_a == 0 {
            return start;
        }
        let noise = generate_brownian(grid.sub(0, k_a).unwrap(), 1, p.n, 0);
        simulate_forward(p, BackwardCandidate::Zero, &start, &noise).unwrap()
    }

    #[test]
    fn decoupled_converges_in_two_iterations() {
        let p = registry::decoupled_brownian(&RegistryParams::default()).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let noise = generate_brownian(grid, 5_000, 1, 3);
        let prefix = prefix_at(&p, grid, 0);
        let g = |x: &PathView, o: &mut [f64]| p.terminal(x, o);
        let sol = local_solve(&p, &prefix, &g, &noise, &LocalConfig::default()).unwrap();
        assert_eq!(sol.iterations, 2);
        assert_eq!(sol.residual_history[1], 0.0);
    }

    #[test]
    fn fromm_imkeller_short_interval_matches_closed_form() {
        // Local problem on [0.4, 0.5] with Y_{0.5} = X_{0.5}: Y_{0.4} = X_{0.4}/0.9.
        let p = registry::fromm_imkeller(&RegistryParams { horizon: 0.5, ..Default::default() }).unwrap();
        let grid = TimeGrid::new(0.0, 0.5, 50).unwrap();
        let start = PathEnsemble::constant_start(grid, &[1.0], 1).unwrap();
        // Spread the state at 0.4 so the regression sees a range of x.
        let pre_noise = generate_brownian(grid.sub(0, 40).unwrap(), 20_000, 1, 1);
        let spread = crate::problem::registry::decoupled_brownian(&RegistryParams { x0: Some(1.0), ..Default::default() }).unwrap();
        let prefix = simulate_forward(&spread, BackwardCandidate::Zero, &start, &pre_noise).unwrap();
        let noise = generate_brownian(grid.sub(40, 50).unwrap(), 20_000, 1, 2);
        let g = |x: &PathView, o: &mut [f64]| p.terminal(x, o);
        let sol = local_solve(&p, &prefix, &g, &noise, &LocalConfig::default()).unwrap();
        let mut worst: f64 = 0.0;
        for path in 0..20_000 {
            let x = sol.ensemble.state(path, 40)[0];
            if x.abs() > 0.5 {
                worst = worst.max((sol.backward.y(path, 0)[0] / (x / 0.9) - 1.0).abs());
            }
        }
        assert!(worst < 0.02, "{worst}");
        assert!(sol.contraction_estimate.map_or(true, |r| r < 1.0));
    }

    #[test]
    fn delarue_without_offset_is_rejected_before_iterating() {
        let p = registry::delarue(&RegistryParams { k: Some(0.0), ..Default::default() }).unwrap();
        let grid = TimeGrid::new(0.0, 0.1, 10).unwrap();
        let noise = generate_brownian(grid, 100, 1, 3);
        let prefix = prefix_at(&p, grid, 0);
        let g = |x: &PathView, o: &mut [f64]| p.terminal(x, o);
        assert!(matches!(
            local_solve(&p, &prefix, &g, &noise, &LocalConfig::default()),
            Err(PicardError::Precondition(_))
        ));
    }

    #[test]
    fn strict_check_rejects_long_interval() {
        let p = registry::fromm_imkeller(&RegistryParams::default()).unwrap();
        let grid = TimeGrid::new(0.0, 0.5, 10).unwrap();
        let noise = generate_brownian(grid, 100, 1, 3);
        let prefix = prefix_at(&p, grid, 0);
        let g = |x: &PathView, o: &mut [f64]| p.terminal(x, o);
        let cfg = LocalConfig { check: Some(ContractionCheck::Strict { k_terminal: 1.0, eps: None }), ..Default::default() };
        assert!(matches!(local_solve(&p, &prefix, &g, &noise, &cfg), Err(PicardError::Precondition(_))));
    }

    #[test]
    fn restart_from_fixed_point_takes_one_iteration() {
        let p = registry::fromm_imkeller(&RegistryParams { horizon: 0.2, ..Default::default() }).unwrap();
        let grid = TimeGrid::new(0.0, 0.2, 20).unwrap();
        let noise = generate_brownian(grid, 4_000, 1, 5);
        let prefix = prefix_at(&p, grid, 0);
        let g = |x: &PathView, o: &mut [f64]| p.terminal(x, o);
        let cfg = LocalConfig::default();
        let first = local_solve(&p, &prefix, &g, &noise, &cfg).unwrap();
        assert!(first.iterations > 2);
        let again = local_solve_from(&p, &prefix, &g, &noise, &cfg, Some(&first.backward)).unwrap();
        assert_eq!(again.iterations, 1);
        assert!(again.residual_history[0] <= cfg.tol_fixed_point);
    }

    #[test]
    fn two_seeds_agree_on_initial_value() {
        let p = registry::fromm_imkeller(&RegistryParams { horizon: 0.2, ..Default::default() }).unwrap();
        let grid = TimeGrid::new(0.0, 0.2, 20).unwrap();
        let prefix = prefix_at(&p, grid, 0);
        let g = |x: &PathView, o: &mut [f64]| p.terminal(x, o);
        let y0 = |seed| {
            let noise = generate_brownian(grid, 4_000, 1, seed);
            let s = local_solve(&p, &prefix, &g, &noise, &LocalConfig::default()).unwrap();
            s.backward.y_mean(0)[0]
        };
        // Y is deterministic here (Z = 0), so both equal 1/(1 − 0.2) up to the
        // fixed-point tolerance, whose square root bounds the error in Y.
        let (a, b) = (y0(1), y0(2));
        assert!((a - b).abs() < 1e-9);
        assert!((a - 1.25).abs() < 1e-3, "{a}");
    }

    #[test]
    fn residuals_contract_after_first_iteration() {
        let p = registry::fromm_imkeller(&RegistryParams { horizon: 0.3, ..Default::default() }).unwrap();
        let grid = TimeGrid::new(0.0, 0.3, 30).unwrap();
        let prefix = prefix_at(&p, grid, 0);
        let g = |x: &PathView, o: &mut [f64]| p.terminal(x, o);
        for seed in 1..=3 {
            let noise = generate_brownian(grid, 2_000, 1, seed);
            let s = local_solve(&p, &prefix, &g, &noise, &LocalConfig::default()).unwrap();
            let r = s.contraction_estimate.unwrap();
            assert!(r < 1.0, "{:?}", s.residual_history);
        }
    }

    /// Field `u(t, x) = x/(1 − (T − t))`, `ẑ = 0` on a grid of horizon `T`.
    struct ExactFI(f64);

    impl CandidateField for ExactFI {
        fn eval(&self, path: &PathView, y: &mut [f64], z: &mut [f64]) {
            y[0] = path.current()[0] / (1.0 - (self.0 - path.now()));
            z[0] = 0.0;
        }
    }

    #[test]
    fn field_start_near_fixed_point() {
        let p = registry::fromm_imkeller(&RegistryParams { horizon: 0.2, ..Default::default() }).unwrap();
        let grid = TimeGrid::new(0.0, 0.2, 20).unwrap();
        let noise = generate_brownian(grid, 4_000, 1, 5);
        let prefix = prefix_at(&p, grid, 0);
        let g = |x: &PathView, o: &mut [f64]| p.terminal(x, o);
        let cfg = LocalConfig::default();
        let cold = local_solve(&p, &prefix, &g, &noise, &cfg).unwrap();
        let warm = local_solve_with_field(&p, &prefix, &g, &noise, &cfg, &ExactFI(0.2)).unwrap();
        let frozen = local_solve_with_field(&p, &prefix, &g, &noise, &cfg, &FrozenTerminal(&g)).unwrap();
        assert!(warm.iterations <= 2 && warm.iterations < cold.iterations, "{:?}", warm.residual_history);
        assert!(frozen.iterations <= cold.iterations);
        assert!(frozen.residual_history[0] < cold.residual_history[0]);
        for s in [&warm, &frozen] {
            assert!((s.backward.y_mean(0)[0] - cold.backward.y_mean(0)[0]).abs() < 1e-3);
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let p = registry::integral_terminal(&RegistryParams::default()).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let noise = generate_brownian(grid, 5_000, 1, 9);
        let prefix = prefix_at(&p, grid, 0);
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let g = |x: &PathView, o: &mut [f64]| p.terminal(x, o);
                let s = local_solve(&p, &prefix, &g, &noise, &LocalConfig::default()).unwrap();
                (s.residual_history, s.backward.y_data().to_vec(), s.backward.z_data().to_vec())
            })
        };
        assert_eq!(run(1), run(3));
    }
}
