//! Choice of `ε` and of a partition of `[0, T]` on which every interval has a
//! contraction factor below target, planned backward from `T`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::picard_solver::{contraction_constants_for, eps_grid, gamma_limit, golden_min};
use crate::problem::{small_time_condition, LipschitzData};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlannerError {
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("invalid search configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub gamma_target: f64,
    pub eps_min: f64,
    pub eps_max: f64,
    pub n_eps: usize,
    /// Upper cap on an interval length; reached when `γ` never exceeds the target.
    pub delta_max: f64,
    pub bisection_iters: usize,
    /// A plan with more intervals is declared infeasible at the current endpoint.
    pub max_intervals: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            gamma_target: 0.9,
            eps_min: 1e-4,
            eps_max: 10.0,
            n_eps: 60,
            delta_max: 1e3,
            bisection_iters: 200,
            max_intervals: 10_000,
        }
    }
}

impl SearchConfig {
    fn validate(&self) -> Result<(), PlannerError> {
        let ok = self.gamma_target > 0.0
            && self.eps_min > 0.0
            && self.eps_max >= self.eps_min
            && self.n_eps >= 1
            && self.delta_max > 0.0
            && self.max_intervals >= 1;
        if ok {
            Ok(())
        } else {
            Err(PlannerError::Config(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalInterval {
    pub delta: f64,
    pub eps: f64,
    pub gamma: f64,
}

/// Longest `δ` with `γ(ε, δ) ≤ γ_target` for a fixed `ε`, by doubling then bisection.
fn max_delta_at(k0: f64, k_term: f64, gz: f64, eps: f64, cfg: &SearchConfig) -> Option<f64> {
    let target = cfg.gamma_target;
    if gamma_limit(k0, k_term, gz, eps) > target {
        return None;
    }
    let gamma = |d: f64| contraction_constants_for(k0, k_term, gz, eps, d).gamma;
    if gamma(cfg.delta_max) <= target {
        return Some(cfg.delta_max);
    }
    let mut lo = 0.0;
    let mut hi = cfg.delta_max.min(1e-6);
    while gamma(hi) <= target {
        lo = hi;
        hi = (2.0 * hi).min(cfg.delta_max);
    }
    for _ in 0..cfg.bisection_iters {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if gamma(mid) <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo > 0.0).then_some(lo)
}

fn infeasible_product(k_term: f64, gz: f64) -> String {
    format!("K1·|∇zσ| = {} (must be < 1)", k_term * gz)
}

/// Longest single interval for a terminal Lipschitz constant `k_term`.
pub fn max_local_interval(k0: f64, k_term: f64, grad_z_sigma: f64, cfg: &SearchConfig) -> Result<LocalInterval, PlannerError> {
    cfg.validate()?;
    if !k_term.is_finite() {
        return Err(PlannerError::Infeasible("terminal Lipschitz bound is infinite".into()));
    }
    if !small_time_condition(k_term, grad_z_sigma).pass {
        return Err(PlannerError::Infeasible(infeasible_product(k_term, grad_z_sigma)));
    }
    let grid = eps_grid(cfg.eps_min, cfg.eps_max, cfg.n_eps);
    let deltas: Vec<Option<f64>> = grid.iter().map(|e| max_delta_at(k0, k_term, grad_z_sigma, *e, cfg)).collect();
    let best = deltas
        .iter()
        .enumerate()
        .filter_map(|(i, d)| d.map(|d| (i, d)))
        .fold(None, |acc: Option<(usize, f64)>, (i, d)| match acc {
            Some((_, bd)) if bd >= d => acc,
            _ => Some((i, d)),
        });
    let Some((i_best, d_best)) = best else {
        return Err(PlannerError::Infeasible(format!(
            "no ε in [{}, {}] reaches γ ≤ {} ({})",
            cfg.eps_min,
            cfg.eps_max,
            cfg.gamma_target,
            infeasible_product(k_term, grad_z_sigma)
        )));
    };
    let mut eps = grid[i_best];
    let mut delta = d_best;
    if d_best < cfg.delta_max && grid.len() > 1 {
        let lo = grid[i_best.saturating_sub(1)].ln();
        let hi = grid[(i_best + 1).min(grid.len() - 1)].ln();
        let neg = |u: f64| -max_delta_at(k0, k_term, grad_z_sigma, u.exp(), cfg).unwrap_or(0.0);
        let e = golden_min(neg, lo, hi, 40).exp();
        if let Some(d) = max_delta_at(k0, k_term, grad_z_sigma, e, cfg) {
            if d > delta {
                eps = e;
                delta = d;
            }
        }
    }
    let gamma = contraction_constants_for(k0, k_term, grad_z_sigma, eps, delta).gamma;
    Ok(LocalInterval { delta, eps, gamma })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub t_a: f64,
    pub t_b: f64,
    pub eps: f64,
    /// `γ` at the interval's actual length.
    pub gamma: f64,
    pub k_terminal_used: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub horizon: f64,
    /// Increasing partition points; starts at 0 only when feasible.
    pub partition: Vec<f64>,
    pub intervals: Vec<IntervalRecord>,
    pub feasible: bool,
    pub blocking_time: Option<f64>,
    pub reason: Option<String>,
    pub search: SearchConfig,
}

impl StepPlan {
    pub fn n_intervals(&self) -> usize {
        self.intervals.len()
    }

    pub fn min_interval_length(&self) -> Option<f64> {
        self.intervals.iter().map(|r| r.t_b - r.t_a).reduce(f64::min)
    }

    pub fn max_k(&self) -> Option<f64> {
        self.intervals.iter().map(|r| r.k_terminal_used).reduce(f64::max)
    }
}

/// Plans backward from `T`: each right endpoint `t_b` uses `K_{t_b}` as the
/// terminal Lipschitz constant and steps left by the longest admissible interval.
pub fn plan_steps(l: &LipschitzData, horizon: f64, k_schedule: &dyn Fn(f64) -> f64, cfg: &SearchConfig) -> Result<StepPlan, PlannerError> {
    cfg.validate()?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(PlannerError::Config(format!("horizon must be positive, got {horizon}")));
    }
    let mut intervals = Vec::new();
    let mut t_b = horizon;
    let blocked = loop {
        if intervals.len() >= cfg.max_intervals {
            break Some((t_b, format!("more than {} intervals needed", cfg.max_intervals)));
        }
        let k = k_schedule(t_b);
        let step = match max_local_interval(l.k0, k, l.grad_z_sigma, cfg) {
            Ok(s) => s,
            Err(PlannerError::Infeasible(reason)) => break Some((t_b, reason)),
            Err(e) => return Err(e),
        };
        let t_a = if step.delta >= t_b { 0.0 } else { t_b - step.delta };
        let gamma = contraction_constants_for(l.k0, k, l.grad_z_sigma, step.eps, t_b - t_a).gamma;
        intervals.push(IntervalRecord { t_a, t_b, eps: step.eps, gamma, k_terminal_used: k });
        if t_a == 0.0 {
            break None;
        }
        t_b = t_a;
    };
    intervals.reverse();
    let mut partition: Vec<f64> = intervals.iter().map(|r| r.t_a).collect();
    partition.push(horizon);
    if intervals.is_empty() {
        partition = vec![horizon];
    }
    let (feasible, blocking_time, reason) = match blocked {
        None => (true, None, None),
        Some((t, r)) => (false, Some(t), Some(r)),
    };
    Ok(StepPlan { horizon, partition, intervals, feasible, blocking_time, reason, search: *cfg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::picard_solver::contraction_constants;
    use proptest::prelude::*;

    #[test]
    fn unit_product_is_infeasible() {
        let err = max_local_interval(1.0, 1.0, 1.0, &SearchConfig::default()).unwrap_err();
        assert_eq!(err, PlannerError::Infeasible("K1·|∇zσ| = 1 (must be < 1)".into()));
    }

    #[test]
    fn interval_gamma_re_verifies() {
        let r = max_local_interval(1.0, 1.0, 0.0, &SearchConfig::default()).unwrap();
        assert!(r.delta > 0.0);
        let l = LipschitzData::new(1.0, 1.0, 0.0).unwrap();
        assert!(contraction_constants(&l, r.eps, r.delta).gamma <= 0.9);
    }

    #[test]
    fn doubling_k0_never_lengthens_interval() {
        let cfg = SearchConfig::default();
        let d: Vec<f64> = [1.0, 2.0, 4.0].iter().map(|k0| max_local_interval(*k0, 1.0, 0.0, &cfg).unwrap().delta).collect();
        assert!(d[1] <= d[0] && d[2] <= d[1], "{d:?}");
    }

    #[test]
    fn deterministic_result() {
        let cfg = SearchConfig::default();
        assert_eq!(max_local_interval(1.3, 0.7, 0.2, &cfg), max_local_interval(1.3, 0.7, 0.2, &cfg));
    }

    #[test]
    fn constant_schedule_gives_uniform_plan() {
        let l = LipschitzData::new(1.0, 1.0, 0.0).unwrap();
        let plan = plan_steps(&l, 0.1, &|_| 1.0, &SearchConfig::default()).unwrap();
        assert!(plan.feasible);
        let first = plan.intervals.last().unwrap().t_b - plan.intervals.last().unwrap().t_a;
        // All but the leftmost (remainder) interval share one length.
        for r in &plan.intervals[1..] {
            assert!(((r.t_b - r.t_a) - first).abs() < 1e-12);
        }
        assert_eq!(plan.partition[0], 0.0);
        assert_eq!(*plan.partition.last().unwrap(), 0.1);
    }

    #[test]
    fn decoupled_plan_respects_interval_count_bound() {
        // K0 = 0: γ ≡ 0 so a single capped interval covers any horizon.
        let l = LipschitzData::new(0.0, 1.0, 0.0).unwrap();
        let cfg = SearchConfig::default();
        for t in [0.5, 5.0, 50.0] {
            let plan = plan_steps(&l, t, &|_| 1.0, &cfg).unwrap();
            let eps_bar = max_local_interval(0.0, 1.0, 0.0, &cfg).unwrap().delta;
            assert!(plan.feasible);
            assert!(plan.n_intervals() <= (t / eps_bar).ceil() as usize + 1);
        }
        // K0 > 0 with a decoupled structure still obeys the floor.
        let l = LipschitzData::new(0.5, 1.0, 0.0).unwrap();
        let plan = plan_steps(&l, 0.2, &|_| 1.0, &cfg).unwrap();
        let eps_bar = max_local_interval(0.5, 1.0, 0.0, &cfg).unwrap().delta;
        assert!(plan.n_intervals() <= (0.2 / eps_bar).ceil() as usize + 1);
    }

    #[test]
    fn exploding_schedule_blocks() {
        // K_t = 1/(1 − (T − t)) with T = 1 blows up at t = 0.
        let l = LipschitzData::new(1.0, 1.0, 0.0).unwrap();
        let cfg = SearchConfig { max_intervals: 2_000, ..Default::default() };
        let sched = |t: f64| {
            let d = 1.0 - (1.0 - t);
            if d <= 0.0 {
                f64::INFINITY
            } else {
                1.0 / d
            }
        };
        let plan = plan_steps(&l, 1.0, &sched, &cfg).unwrap();
        assert!(!plan.feasible);
        assert!(plan.blocking_time.unwrap() < 0.5);
    }

    #[test]
    fn every_interval_re_verifies_and_respects_floor() {
        let l = LipschitzData::new(1.0, 1.0, 0.0).unwrap();
        let cfg = SearchConfig::default();
        let sched = |t: f64| 1.0 + (0.05 - t);
        let plan = plan_steps(&l, 0.05, &sched, &cfg).unwrap();
        assert!(plan.feasible);
        let k_max = plan.max_k().unwrap();
        let eps_bar = max_local_interval(l.k0, k_max, 0.0, &cfg).unwrap().delta;
        for r in &plan.intervals {
            let g = contraction_constants_for(l.k0, r.k_terminal_used, 0.0, r.eps, r.t_b - r.t_a).gamma;
            assert!(g < 1.0);
            assert_eq!(r.k_terminal_used, sched(r.t_b));
        }
        // The leftmost interval is the remainder and may be shorter.
        for r in &plan.intervals[1..] {
            assert!(r.t_b - r.t_a >= eps_bar);
        }
        for w in plan.partition.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn shorter_horizon_needs_no_more_intervals(t in 0.005f64..0.05, frac in 0.1f64..1.0) {
            let l = LipschitzData::new(1.0, 1.0, 0.0).unwrap();
            let cfg = SearchConfig::default();
            // Same terminal dynamics: K depends on time to go.
            let long = plan_steps(&l, t, &|s| 1.0 + (t - s), &cfg).unwrap();
            let tp = t * frac;
            let short = plan_steps(&l, tp, &|s| 1.0 + (tp - s), &cfg).unwrap();
            prop_assert!(short.n_intervals() <= long.n_intervals());
        }
    }
}
