//! Characteristic-BSDE coefficients, their worst-case and sampled bounds, and
//! the dominating ODE whose backward solution bounds the squared Lipschitz
//! constant of the decoupling field.
//!
//! Sign convention: an ODE is stored through its right-hand side `G(y)` and
//! solved as `ẏ_t = −G(y_t)` backward from `y_T`, so `y` grows as `t` decreases
//! whenever `G > 0`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::path_space::{PathEnsemble, PathView, TimeGrid};
use crate::problem::{FBSDEProblem, LipschitzData, MonotonicityReport, ProblemClass};
use crate::sde_engine::{generate_brownian, simulate_forward, BackwardCandidate, SimulationError};

pub const DEFAULT_BLOWUP_THRESHOLD: f64 = 1e8;
pub const DEFAULT_ODE_STEPS: usize = 10_000;
const REFINE_SPLIT: usize = 16;
const REFINE_LEVELS: usize = 6;
const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OdeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid characteristic inputs: {0}")]
    Inputs(String),
    #[error("non-finite value at t = {0}")]
    NonFinite(f64),
    #[error("invalid ODE settings: {0}")]
    Settings(String),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
}

/// Difference quotients and state ratios at one time.
///
/// Layouts (row-major): `b_y` is `d×n`; `b_z[i]` is `n×n` for `i < d`; `sigma_x`
/// is `d×n`; `sigma_y[k]` is `d×n` for `k < n`; `sigma_z[i·n+j]` is `n×n`;
/// `f_y` is `n×n`; `f_z[i]` is `n×n`; `alpha` is `n×n`. A `z`-quotient `M` acts
/// on `α` through the matrix trace `Tr(Mα) = Σ M_{kl} α_{lk}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacteristicInputs {
    pub d: usize,
    pub n: usize,
    pub b_x: Vec<f64>,
    pub b_y: Vec<f64>,
    pub b_z: Vec<f64>,
    pub sigma_x: Vec<f64>,
    pub sigma_y: Vec<f64>,
    pub sigma_z: Vec<f64>,
    pub f_x: Vec<f64>,
    pub f_y: Vec<f64>,
    pub f_z: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub p: Vec<f64>,
    pub h: f64,
}

impl CharacteristicInputs {
    /// All gradients zero, `α = β = P = 0`, `H = 0`.
    pub fn zeros(d: usize, n: usize) -> Self {
        let nn = n * n;
        Self {
            d,
            n,
            b_x: vec![0.0; d],
            b_y: vec![0.0; d * n],
            b_z: vec![0.0; d * nn],
            sigma_x: vec![0.0; d * n],
            sigma_y: vec![0.0; n * d * n],
            sigma_z: vec![0.0; d * n * nn],
            f_x: vec![0.0; n],
            f_y: vec![0.0; nn],
            f_z: vec![0.0; n * nn],
            alpha: vec![0.0; nn],
            beta: vec![0.0; d],
            p: vec![0.0; n],
            h: 0.0,
        }
    }

    fn check(&self) -> Result<(), OdeError> {
        let (d, n) = (self.d, self.n);
        let nn = n * n;
        let shapes = [
            ("b_x", self.b_x.len(), d),
            ("b_y", self.b_y.len(), d * n),
            ("b_z", self.b_z.len(), d * nn),
            ("sigma_x", self.sigma_x.len(), d * n),
            ("sigma_y", self.sigma_y.len(), n * d * n),
            ("sigma_z", self.sigma_z.len(), d * n * nn),
            ("f_x", self.f_x.len(), n),
            ("f_y", self.f_y.len(), nn),
            ("f_z", self.f_z.len(), n * nn),
            ("alpha", self.alpha.len(), nn),
            ("beta", self.beta.len(), d),
            ("p", self.p.len(), n),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(OdeError::Dimension(format!("{name} has {got} entries, expected {want}")));
            }
        }
        let beta = norm(&self.beta);
        let p = norm(&self.p);
        if beta > 1.0 + UNIT_TOL {
            return Err(OdeError::Inputs(format!("|β| = {beta} exceeds 1")));
        }
        if !(self.h >= 0.0) {
            return Err(OdeError::Inputs(format!("H = {} is negative", self.h)));
        }
        if p == 0.0 {
            if self.h != 0.0 {
                return Err(OdeError::Inputs("P = 0 requires H = 0".into()));
            }
        } else if (p - 1.0).abs() > UNIT_TOL {
            return Err(OdeError::Inputs(format!("|P| = {p} is neither 0 nor 1")));
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Tr(Mα)` for `n×n` row-major `M`, `α`.
fn trace_with(m: &[f64], alpha: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for k in 0..n {
        for l in 0..n {
            s += m[k * n + l] * alpha[l * n + k];
        }
    }
    s
}

/// `(Mᵀβ)` for a `d×n` matrix `M`.
fn transpose_apply(m: &[f64], beta: &[f64], d: usize, n: usize) -> Vec<f64> {
    (0..n).map(|j| (0..d).map(|i| m[i * n + j] * beta[i]).sum()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CharacteristicCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d_coef: f64,
    pub f: f64,
    /// Martingale integrand, a row of length `n`.
    pub n_row: Vec<f64>,
}

/// Evaluates the drift `A h² + B h^{3/2} + C h + D h^{1/2} + F` coefficients and `N`.
pub fn characteristic_coefficients(inp: &CharacteristicInputs) -> Result<CharacteristicCoefficients, OdeError> {
    inp.check()?;
    let (d, n) = (inp.d, inp.n);
    let nn = n * n;
    let (alpha, beta, p) = (&inp.alpha, &inp.beta, &inp.p);
    let sqrt_h = inp.h.sqrt();

    // σ_y P and M = σ_x + Tr(σ_z α), both d×n.
    let mut sy_p = vec![0.0; d * n];
    for (k, pk) in p.iter().enumerate() {
        for (o, s) in sy_p.iter_mut().zip(&inp.sigma_y[k * d * n..(k + 1) * d * n]) {
            *o += s * pk;
        }
    }
    let tr_sz: Vec<f64> = (0..d * n).map(|ij| trace_with(&inp.sigma_z[ij * nn..(ij + 1) * nn], alpha, n)).collect();
    let m: Vec<f64> = inp.sigma_x.iter().zip(&tr_sz).map(|(a, b)| a + b).collect();

    let sy_p_t_beta = transpose_apply(&sy_p, beta, d, n);
    let m_t_beta = transpose_apply(&m, beta, d, n);
    let sx_t_beta = transpose_apply(&inp.sigma_x, beta, d, n);

    let a = dot(&sy_p, &sy_p) - 8.0 * dot(&sy_p_t_beta, &sy_p_t_beta);

    let b_y_p: Vec<f64> = (0..d).map(|i| dot(&inp.b_y[i * n..(i + 1) * n], p)).collect();
    // Tr(σ_y P Mᵀ) is the Frobenius pairing of σ_y P with M.
    let b = 2.0 * dot(beta, &b_y_p) + 2.0 * dot(&sy_p, &m) - 16.0 * dot(&sy_p_t_beta, &m_t_beta);

    let f_y_p: Vec<f64> = (0..n).map(|i| dot(&inp.f_y[i * n..(i + 1) * n], p)).collect();
    let tr_bz: Vec<f64> = (0..d).map(|i| trace_with(&inp.b_z[i * nn..(i + 1) * nn], alpha, n)).collect();
    let drift_term: Vec<f64> = inp.b_x.iter().zip(&tr_bz).map(|(x, z)| x + z).collect();
    let c = 2.0 * dot(p, &f_y_p) + dot(beta, beta) + 2.0 * dot(beta, &drift_term) + dot(&inp.sigma_x, &inp.sigma_x)
        - 8.0 * dot(&sx_t_beta, &sx_t_beta);

    let tr_fz: Vec<f64> = (0..n).map(|i| trace_with(&inp.f_z[i * nn..(i + 1) * nn], alpha, n)).collect();
    let d_coef = 2.0 * dot(p, &inp.f_x) + 2.0 * dot(p, &tr_fz);
    let f = -dot(alpha, alpha);

    // N = 2√H Pᵀα − 2H βᵀ(σ_x + σ_y P √H + Tr(σ_z α)).
    let inner: Vec<f64> = m.iter().zip(&sy_p).map(|(m, s)| m + s * sqrt_h).collect();
    let inner_t_beta = transpose_apply(&inner, beta, d, n);
    let n_row = (0..n)
        .map(|l| {
            let p_alpha: f64 = (0..n).map(|k| p[k] * alpha[k * n + l]).sum();
            2.0 * sqrt_h * p_alpha - 2.0 * inp.h * inner_t_beta[l]
        })
        .collect();
    Ok(CharacteristicCoefficients { a, b, c, d_coef, f, n_row })
}

/// Upper bounds on the coefficients, after absorbing every term linear in `|α|`
/// into `F = −|α|²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBounds {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub f: f64,
}

/// Worst-case bounds from Lipschitz data.
///
/// With per-coordinate quotients bounded by `L`, the `y`-quotients are bounded
/// by `√n·L` and the `z`-quotients by `n·L` in Frobenius norm. Dropping the
/// negative terms, the α-dependent part is `|α|·ℓ(h) − |α|²` with
/// `ℓ = c_B h^{3/2} + c_C h + c_D h^{1/2}`, at most `ℓ²/4`. Powers above `h²`
/// are folded with `h ≤ 1/|∇zσ|²`, valid wherever `K·|∇zσ| < 1`, and the odd
/// powers are kept for the display `h^{3/2} ≤ (h² + h)/2`, `h^{1/2} ≤ (h + 1)/2`.
pub fn coefficient_bounds(l: &LipschitzData, class: ProblemClass, d: usize, n: usize) -> CoefficientBounds {
    let _ = d;
    let g = l.gradient_bounds(class);
    let rn = (n as f64).sqrt();
    let nf = n as f64;
    let (bx, by, bz) = (g.b_x, rn * g.b_y, nf * g.b_z);
    let (sx, sy, sz) = (g.sigma_x, rn * g.sigma_y, nf * g.sigma_z);
    let (fx, fy, fz) = (g.f_x, rn * g.f_y, nf * g.f_z);

    let c_b = 18.0 * sy * sz;
    let c_c = 2.0 * bz;
    let c_d = 2.0 * fz;
    let p3 = c_b * c_b / 4.0;
    let p52 = c_b * c_c / 2.0;
    let p2 = sy * sy + c_c * c_c / 4.0 + c_b * c_d / 2.0;
    let p32 = 2.0 * by + 18.0 * sy * sx + c_c * c_d / 2.0;
    let p1 = 2.0 * fy + 1.0 + 2.0 * bx + sx * sx + c_d * c_d / 4.0;
    let p12 = 2.0 * fx;
    let gz = g.sigma_z;
    let folded = if gz > 0.0 { p3 / (gz * gz) + p52 / gz } else { 0.0 };
    CoefficientBounds { a: p2 + folded, b: p32, c: p1, d: p12, f: 0.0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub horizon: f64,
    pub n_steps: usize,
    /// Standard deviation of the Gaussian spread around `x0` at time 0.
    pub spread: f64,
}

impl Default for EmpiricalConfig {
    fn default() -> Self {
        Self { n_samples: 2_000, seed: 0, horizon: 1.0, n_steps: 20, spread: 1.0 }
    }
}

fn telescoped_quotients(
    coeff: &dyn Fn(&PathView, &[f64], &[f64], &mut [f64]),
    xp: &PathView,
    y: &[f64],
    yp: &[f64],
    z: &[f64],
    zp: &[f64],
    len: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = y.len();
    let mut lo = vec![0.0; len];
    let mut hi = vec![0.0; len];
    // y part: ξ(x', y'_{<k}, y_{≥k}, z) − ξ(x', y'_{≤k}, y_{>k}, z).
    let mut yq = Vec::with_capacity(n);
    let mut cur = y.to_vec();
    for k in 0..n {
        coeff(xp, &cur, z, &mut hi);
        cur[k] = yp[k];
        coeff(xp, &cur, z, &mut lo);
        let dy = y[k] - yp[k];
        yq.push(hi.iter().zip(&lo).map(|(a, b)| (a - b) / dy).collect());
    }
    let mut zq = Vec::with_capacity(n * n);
    let mut cur_z = z.to_vec();
    for kl in 0..n * n {
        coeff(xp, yp, &cur_z, &mut hi);
        cur_z[kl] = zp[kl];
        coeff(xp, yp, &cur_z, &mut lo);
        let dz = z[kl] - zp[kl];
        zq.push(hi.iter().zip(&lo).map(|(a, b)| (a - b) / dz).collect());
    }
    (yq, zq)
}

/// Sample maxima of the coefficients over simulated forward path pairs with
/// Gaussian `(y, z)` pairs, using the telescoping difference quotients.
pub fn empirical_coefficient_bounds(p: &FBSDEProblem, cfg: &EmpiricalConfig) -> Result<CoefficientBounds, OdeError> {
    if cfg.n_samples == 0 || cfg.n_steps == 0 {
        return Err(OdeError::Settings("empirical sampling needs samples and steps".into()));
    }
    let (d, n) = (p.d, p.n);
    let nn = n * n;
    let grid = TimeGrid::new(0.0, cfg.horizon, cfg.n_steps).map_err(|e| OdeError::Settings(e.to_string()))?;
    let noise = generate_brownian(grid, 2 * cfg.n_samples, n, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut normal = |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut rng)).collect() };
    // Spread initial states so that systems without noise still produce distinct paths.
    let initial: Vec<f64> = normal(2 * cfg.n_samples * d)
        .into_iter()
        .enumerate()
        .map(|(i, e)| p.x0[i % d] + cfg.spread * e)
        .collect();
    let start = PathEnsemble::from_initial(grid, d, initial).map_err(|e| OdeError::Settings(e.to_string()))?;
    let ens = simulate_forward(p, BackwardCandidate::Zero, &start, &noise)?;
    let mut best = CoefficientBounds {
        a: f64::NEG_INFINITY,
        b: f64::NEG_INFINITY,
        c: f64::NEG_INFINITY,
        d: f64::NEG_INFINITY,
        f: f64::NEG_INFINITY,
    };
    let drift = |x: &PathView, y: &[f64], z: &[f64], o: &mut [f64]| p.drift(x, y, z, o);
    let diffusion = |x: &PathView, y: &[f64], z: &[f64], o: &mut [f64]| p.diffusion(x, y, z, o);
    let driver = |x: &PathView, y: &[f64], z: &[f64], o: &mut [f64]| p.driver(x, y, z, o);
    for s in 0..cfg.n_samples {
        let k = 1 + s % cfg.n_steps;
        let x = ens.view(2 * s, k);
        let xp = ens.view(2 * s + 1, k);
        let diff: Vec<f64> = x.values().iter().zip(xp.values()).map(|(a, b)| a - b).collect();
        let dist = PathView::new(grid.t0(), grid.dt(), d, &diff).norm_sq().sqrt();
        if dist == 0.0 {
            continue;
        }
        let (y, yp, z, zp) = (normal(n), normal(n), normal(nn), normal(nn));
        let mut inp = CharacteristicInputs::zeros(d, n);
        let x_quot = |c: &dyn Fn(&PathView, &[f64], &[f64], &mut [f64]), len: usize| -> Vec<f64> {
            let (mut a, mut b) = (vec![0.0; len], vec![0.0; len]);
            c(&x, &y, &z, &mut a);
            c(&xp, &y, &z, &mut b);
            a.iter().zip(&b).map(|(a, b)| (a - b) / dist).collect()
        };
        inp.b_x = x_quot(&drift, d);
        inp.sigma_x = x_quot(&diffusion, d * n);
        inp.f_x = x_quot(&driver, n);
        let (by, bz) = telescoped_quotients(&drift, &xp, &y, &yp, &z, &zp, d);
        let (sy, sz) = telescoped_quotients(&diffusion, &xp, &y, &yp, &z, &zp, d * n);
        let (fy, fz) = telescoped_quotients(&driver, &xp, &y, &yp, &z, &zp, n);
        // Quotient w.r.t. z_{kl} sits at position (l, k) so that Tr(Mα) pairs it with α_{kl}.
        let place_z = |zq: &[Vec<f64>], rows: usize, out: &mut Vec<f64>| {
            for r in 0..rows {
                for kk in 0..n {
                    for ll in 0..n {
                        out[r * nn + ll * n + kk] = zq[kk * n + ll][r];
                    }
                }
            }
        };
        for i in 0..d {
            for k in 0..n {
                inp.b_y[i * n + k] = by[k][i];
            }
        }
        for k in 0..n {
            inp.sigma_y[k * d * n..(k + 1) * d * n].copy_from_slice(&sy[k]);
        }
        for i in 0..n {
            for k in 0..n {
                inp.f_y[i * n + k] = fy[k][i];
            }
        }
        place_z(&bz, d, &mut inp.b_z);
        place_z(&sz, d * n, &mut inp.sigma_z);
        place_z(&fz, n, &mut inp.f_z);
        let dy: Vec<f64> = y.iter().zip(&yp).map(|(a, b)| a - b).collect();
        let dy_norm = norm(&dy);
        inp.alpha = z.iter().zip(&zp).map(|(a, b)| (a - b) / dist).collect();
        inp.beta = x.current().iter().zip(xp.current()).map(|(a, b)| (a - b) / dist).collect();
        inp.p = dy.iter().map(|v| v / dy_norm).collect();
        inp.h = dy_norm * dy_norm / (dist * dist);
        let c = characteristic_coefficients(&inp)?;
        best.a = best.a.max(c.a);
        best.b = best.b.max(c.b);
        best.c = best.c.max(c.c);
        best.d = best.d.max(c.d_coef);
        best.f = best.f.max(c.f);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeKind {
    Linear,
    AffineFromMonotone,
    Riccati,
}

/// `ẏ = −G(y)`, `G(y) = quadratic·y² + linear·y + constant`, `y_T = terminal_value`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominatingODE {
    pub kind: OdeKind,
    pub quadratic: f64,
    pub linear: f64,
    pub constant: f64,
    pub terminal_value: f64,
    pub horizon: f64,
}

impl DominatingODE {
    pub fn g(&self, y: f64) -> f64 {
        (self.quadratic * y + self.linear) * y + self.constant
    }

    pub fn riccati(a: f64, c: f64, horizon: f64) -> Self {
        Self { kind: OdeKind::Riccati, quadratic: a, linear: 0.0, constant: 0.0, terminal_value: c, horizon }
    }
}

/// Builds the dominating ODE for a problem class, with warnings for any fallback.
pub fn build_dominating_ode(
    class: ProblemClass,
    bounds: &CoefficientBounds,
    k1: f64,
    horizon: f64,
    monotone: Option<&MonotonicityReport>,
) -> Result<(DominatingODE, Vec<String>), OdeError> {
    let b = bounds;
    if ![b.a, b.b, b.c, b.d, b.f].iter().all(|v| v.is_finite()) {
        return Err(OdeError::Settings("coefficient bounds must be finite".into()));
    }
    let (a, bb, c, d, f) = (b.a.abs(), b.b.abs(), b.c.abs(), b.d.abs(), b.f.abs());
    let terminal_value = k1 * k1;
    let mut warnings = Vec::new();
    let riccati = DominatingODE {
        kind: OdeKind::Riccati,
        quadratic: a + bb / 2.0,
        linear: c + bb / 2.0 + d / 2.0,
        constant: f + d / 2.0,
        terminal_value,
        horizon,
    };
    let ode = match class {
        ProblemClass::Decoupled => DominatingODE {
            kind: OdeKind::Linear,
            quadratic: 0.0,
            linear: c + bb / 2.0 + d / 2.0,
            constant: f + d / 2.0,
            terminal_value,
            horizon,
        },
        ProblemClass::DriftYSigmaX => match monotone {
            Some(r) if r.is_clean() => DominatingODE {
                kind: OdeKind::AffineFromMonotone,
                quadratic: 0.0,
                linear: c + d / 2.0,
                constant: f + d / 2.0,
                terminal_value,
                horizon,
            },
            _ => {
                warnings.push("monotonicity not certified; using the Riccati dominating ODE".to_string());
                riccati
            }
        },
        ProblemClass::SigmaXY | ProblemClass::General => riccati,
    };
    Ok((ode, warnings))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ODESolution {
    /// Increasing times; the first is `t_max` when the solution exploded.
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    pub exploded: bool,
    pub t_max: Option<f64>,
    pub k_schedule: Vec<f64>,
}

impl ODESolution {
    /// Conservative `K_t`: the larger of the two bracketing grid values, and
    /// `+∞` before the explosion time.
    pub fn k_at(&self, t: f64) -> f64 {
        let first = self.times[0];
        if t < first {
            return if self.exploded { f64::INFINITY } else { self.k_schedule[0] };
        }
        let last = self.times.len() - 1;
        if t >= self.times[last] {
            return self.k_schedule[last];
        }
        let i = self.times.partition_point(|s| *s <= t);
        // times[i-1] ≤ t < times[i]
        self.k_schedule[i - 1].max(self.k_schedule[i])
    }

    pub fn k_max(&self) -> f64 {
        self.k_schedule.iter().copied().fold(0.0, f64::max)
    }
}

fn rk4_step(ode: &DominatingODE, y: f64, h: f64) -> f64 {
    // In backward time s = T − t the equation is dy/ds = G(y).
    let k1 = ode.g(y);
    let k2 = ode.g(y + 0.5 * h * k1);
    let k3 = ode.g(y + 0.5 * h * k2);
    let k4 = ode.g(y + h * k3);
    y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Locates the first threshold crossing inside a step of backward length `h`
/// starting from `(s, y)` by repeated subdivision; returns `(s, y)` just past it.
fn refine_crossing(ode: &DominatingODE, s: f64, y: f64, h: f64, threshold: f64, level: usize) -> Result<(f64, f64), OdeError> {
    let sub = h / REFINE_SPLIT as f64;
    let (mut s_cur, mut y_cur) = (s, y);
    for _ in 0..REFINE_SPLIT {
        let next = rk4_step(ode, y_cur, sub);
        if next.is_nan() {
            return Err(OdeError::NonFinite(ode.horizon - s_cur));
        }
        if next > threshold {
            if level + 1 >= REFINE_LEVELS {
                return Ok((s_cur + sub, next));
            }
            return refine_crossing(ode, s_cur, y_cur, sub, threshold, level + 1);
        }
        s_cur += sub;
        y_cur = next;
    }
    // Round-off kept the finer path below the threshold; report the step end.
    Ok((s + h, f64::INFINITY))
}

/// Classic RK4 backward from `T` with `n_steps` steps (default [`DEFAULT_ODE_STEPS`]).
pub fn integrate_backward(ode: &DominatingODE, n_steps: Option<usize>, blowup_threshold: f64) -> Result<ODESolution, OdeError> {
    let n_steps = n_steps.unwrap_or(DEFAULT_ODE_STEPS);
    if n_steps == 0 || !(ode.horizon > 0.0) || !(blowup_threshold > 0.0) {
        return Err(OdeError::Settings("need steps > 0, horizon > 0 and threshold > 0".into()));
    }
    let h = ode.horizon / n_steps as f64;
    let mut ys = vec![ode.terminal_value];
    let mut ts = vec![ode.horizon];
    let mut y = ode.terminal_value;
    let mut t_max = None;
    for j in 0..n_steps {
        let s = j as f64 * h;
        let next = rk4_step(ode, y, h);
        if next.is_nan() {
            return Err(OdeError::NonFinite(ode.horizon - s));
        }
        if next > blowup_threshold {
            let (s_cross, y_cross) = refine_crossing(ode, s, y, h, blowup_threshold, 0)?;
            let t = (ode.horizon - s_cross).max(0.0);
            t_max = Some(t);
            ts.push(t);
            ys.push(y_cross);
            break;
        }
        y = next;
        ts.push(if j + 1 == n_steps { 0.0 } else { ode.horizon - (j + 1) as f64 * h });
        ys.push(y);
    }
    ts.reverse();
    ys.reverse();
    let k_schedule = ys.iter().map(|v| v.max(0.0).sqrt()).collect();
    Ok(ODESolution { times: ts, y: ys, exploded: t_max.is_some(), t_max, k_schedule })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzHorizon {
    pub bounds: CoefficientBounds,
    pub ode: DominatingODE,
    pub solution: ODESolution,
    /// Explosion time inside `[0, T]`, if any.
    pub t_max: Option<f64>,
    /// `T − t_max`: how far back from the horizon the bound stays finite.
    pub explosion_length: Option<f64>,
    pub warnings: Vec<String>,
}

/// Worst-case bounds, dominating ODE and its backward solution over `[0, horizon]`.
pub fn t_max_for_lipschitz(
    l: &LipschitzData,
    class: ProblemClass,
    d: usize,
    n: usize,
    horizon: f64,
    monotone: Option<&MonotonicityReport>,
) -> Result<LipschitzHorizon, OdeError> {
    let bounds = coefficient_bounds(l, class, d, n);
    let (ode, warnings) = build_dominating_ode(class, &bounds, l.k1, horizon, monotone)?;
    let solution = integrate_backward(&ode, None, DEFAULT_BLOWUP_THRESHOLD)?;
    let t_max = solution.t_max;
    Ok(LipschitzHorizon { bounds, ode, solution, t_max, explosion_length: t_max.map(|t| horizon - t), warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::registry::{self, RegistryParams};
    use crate::problem::PartialLipschitz;
    use proptest::prelude::*;

    fn ones(d: usize, n: usize) -> CharacteristicInputs {
        let mut i = CharacteristicInputs::zeros(d, n);
        for v in [
            &mut i.b_x,
            &mut i.b_y,
            &mut i.b_z,
            &mut i.sigma_x,
            &mut i.sigma_y,
            &mut i.sigma_z,
            &mut i.f_x,
            &mut i.f_y,
            &mut i.f_z,
            &mut i.alpha,
            &mut i.beta,
            &mut i.p,
        ] {
            v.iter_mut().for_each(|x| *x = 1.0);
        }
        i
    }

    #[test]
    fn scalar_hand_values() {
        for h in [0.0, 0.25, 4.0] {
            let mut inp = ones(1, 1);
            inp.h = h;
            let c = characteristic_coefficients(&inp).unwrap();
            // A = 1 − 8; B = 2 + 2·2 − 16·2; C = 2 + 1 + 2·2 + 1 − 8; D = 2 + 2; F = −1.
            assert!((c.a + 7.0).abs() < 1e-14);
            assert!((c.b + 26.0).abs() < 1e-14);
            assert!(c.c.abs() < 1e-14);
            assert!((c.d_coef - 4.0).abs() < 1e-14);
            assert!((c.f + 1.0).abs() < 1e-14);
            let s = h.sqrt();
            assert!((c.n_row[0] - (2.0 * s - 2.0 * h * (2.0 + s))).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_alpha_gives_zero_f() {
        let mut inp = ones(2, 2);
        inp.alpha = vec![0.0; 4];
        inp.beta = vec![0.6, 0.0];
        inp.p = vec![0.0, 1.0];
        assert_eq!(characteristic_coefficients(&inp).unwrap().f, 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut inp = ones(1, 1);
        inp.beta = vec![1.5];
        assert!(matches!(characteristic_coefficients(&inp), Err(OdeError::Inputs(_))));
        let mut inp = ones(1, 1);
        inp.b_y = vec![1.0, 2.0];
        assert!(matches!(characteristic_coefficients(&inp), Err(OdeError::Dimension(_))));
    }

    fn random_inputs(d: usize, n: usize, seed: u64, structure: ProblemClass) -> CharacteristicInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let mut i = CharacteristicInputs::zeros(d, n);
        i.b_x = draw(d);
        i.b_y = draw(d * n);
        i.b_z = draw(d * n * n);
        i.sigma_x = draw(d * n);
        i.sigma_y = draw(n * d * n);
        i.sigma_z = draw(d * n * n * n);
        i.f_x = draw(n);
        i.f_y = draw(n * n);
        i.f_z = draw(n * n * n);
        i.alpha = draw(n * n);
        let beta = draw(d);
        let scale = 1.0 / (norm(&beta) + 0.5);
        i.beta = beta.iter().map(|v| v * scale).collect();
        let p = draw(n);
        let pn = norm(&p);
        i.p = p.iter().map(|v| v / pn).collect();
        i.h = draw(1)[0].abs();
        if structure <= ProblemClass::SigmaXY {
            i.sigma_z.iter_mut().for_each(|v| *v = 0.0);
        }
        if structure <= ProblemClass::DriftYSigmaX {
            i.b_z.iter_mut().for_each(|v| *v = 0.0);
            i.sigma_y.iter_mut().for_each(|v| *v = 0.0);
        }
        if structure == ProblemClass::Decoupled {
            i.b_y.iter_mut().for_each(|v| *v = 0.0);
        }
        i
    }

    #[test]
    fn structural_zeros_hold_exactly() {
        for seed in 0..200 {
            let c = characteristic_coefficients(&random_inputs(2, 3, seed, ProblemClass::Decoupled)).unwrap();
            assert_eq!((c.a, c.b), (0.0, 0.0));
            let c = characteristic_coefficients(&random_inputs(3, 2, seed, ProblemClass::DriftYSigmaX)).unwrap();
            assert_eq!(c.a, 0.0);
        }
    }

    proptest! {
        #[test]
        fn f_is_never_positive(seed in any::<u64>(), d in 1usize..4, n in 1usize..4) {
            let c = characteristic_coefficients(&random_inputs(d, n, seed, ProblemClass::General)).unwrap();
            prop_assert!(c.f <= 0.0);
        }

        #[test]
        fn worst_case_bounds_dominate_samples(seed in any::<u64>()) {
            // Inputs scaled so every per-coordinate quotient is at most K0 = 0.7 and |∇zσ| = 0.3.
            let (d, n) = (2, 2);
            let mut inp = random_inputs(d, n, seed, ProblemClass::General);
            let clamp = |v: &mut Vec<f64>, lim: f64, block: usize| {
                for chunk in v.chunks_mut(block) {
                    let s = norm(chunk);
                    if s > lim { chunk.iter_mut().for_each(|x| *x *= lim / s); }
                }
            };
            clamp(&mut inp.b_x, 0.7, d);
            clamp(&mut inp.sigma_x, 0.7, d * n);
            clamp(&mut inp.f_x, 0.7, n);
            // y-quotients: one column per y_k.
            let mut by_cols: Vec<f64> = (0..n).flat_map(|k| (0..d).map(move |i| (i, k))).map(|(i, k)| inp.b_y[i * n + k]).collect();
            clamp(&mut by_cols, 0.7, d);
            for k in 0..n { for i in 0..d { inp.b_y[i * n + k] = by_cols[k * d + i]; } }
            clamp(&mut inp.sigma_y, 0.7, d * n);
            let mut fy_cols: Vec<f64> = (0..n).flat_map(|k| (0..n).map(move |i| (i, k))).map(|(i, k)| inp.f_y[i * n + k]).collect();
            clamp(&mut fy_cols, 0.7, n);
            for k in 0..n { for i in 0..n { inp.f_y[i * n + k] = fy_cols[k * n + i]; } }
            // z-quotients: one vector per z_{kl}.
            let clamp_z = |v: &mut Vec<f64>, rows: usize, lim: f64| {
                for kl in 0..n * n {
                    let s: f64 = (0..rows).map(|r| v[r * n * n + kl].powi(2)).sum::<f64>().sqrt();
                    if s > lim { (0..rows).for_each(|r| v[r * n * n + kl] *= lim / s); }
                }
            };
            clamp_z(&mut inp.b_z, d, 0.7);
            clamp_z(&mut inp.sigma_z, d * n, 0.3);
            clamp_z(&mut inp.f_z, n, 0.7);
            // Feasible region: h ≤ 1/|∇zσ|².
            inp.h = inp.h.min(1.0 / 0.09);
            let l = LipschitzData::new(0.7, 1.0, 0.3).unwrap();
            let bd = coefficient_bounds(&l, ProblemClass::General, d, n);
            let c = characteristic_coefficients(&inp).unwrap();
            let h = inp.h;
            let exact = c.a * h * h + c.b * h.powf(1.5) + c.c * h + c.d_coef * h.sqrt() + c.f;
            let bound = bd.a * h * h + bd.b * h.powf(1.5) + bd.c * h + bd.d * h.sqrt() + bd.f;
            prop_assert!(exact <= bound + 1e-9 * bound.abs().max(1.0), "{exact} > {bound}");
        }
    }

    #[test]
    fn worst_case_bound_cases() {
        // b = b(x, y), σ = σ(x): no quadratic term.
        let l = LipschitzData::new(1.3, 1.0, 0.0).unwrap();
        assert_eq!(coefficient_bounds(&l, ProblemClass::DriftYSigmaX, 2, 3).a, 0.0);
        let b = coefficient_bounds(&l, ProblemClass::Decoupled, 2, 3);
        assert_eq!((b.a, b.b), (0.0, 0.0));
        // K0 = 0 leaves only the |β|² contribution to C.
        let l0 = LipschitzData::new(0.0, 1.0, 0.0).unwrap();
        let b0 = coefficient_bounds(&l0, ProblemClass::General, 1, 1);
        assert_eq!((b0.a, b0.b, b0.c, b0.d, b0.f), (0.0, 0.0, 1.0, 0.0, 0.0));
    }

    #[test]
    fn fromm_imkeller_bounds_give_quadratic_with_linear_term() {
        let p = registry::fromm_imkeller(&RegistryParams::default()).unwrap();
        let b = coefficient_bounds(&p.lipschitz, p.declared_class, 1, 1);
        assert_eq!((b.a, b.b, b.c, b.d, b.f), (0.0, 2.0, 1.0, 0.0, 0.0));
        let (ode, w) = build_dominating_ode(p.declared_class, &b, 1.0, 1.0, None).unwrap();
        assert_eq!(ode.kind, OdeKind::Riccati);
        assert_eq!((ode.quadratic, ode.linear, ode.constant), (1.0, 2.0, 0.0));
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn empirical_decoupled_has_zero_a_and_b() {
        let p = registry::decoupled_brownian(&RegistryParams::default()).unwrap();
        let b = empirical_coefficient_bounds(&p, &EmpiricalConfig::default()).unwrap();
        assert_eq!((b.a, b.b), (0.0, 0.0));
        let p = registry::integral_terminal(&RegistryParams::default()).unwrap();
        let b = empirical_coefficient_bounds(&p, &EmpiricalConfig { n_samples: 300, ..Default::default() }).unwrap();
        assert_eq!((b.a, b.b), (0.0, 0.0));
    }

    #[test]
    fn empirical_fromm_imkeller_has_zero_a() {
        let p = registry::fromm_imkeller(&RegistryParams::default()).unwrap();
        let b = empirical_coefficient_bounds(&p, &EmpiricalConfig { n_samples: 300, ..Default::default() }).unwrap();
        assert_eq!(b.a, 0.0);
        assert!(b.f <= 0.0);
    }

    #[test]
    fn build_cases() {
        let zero = CoefficientBounds { a: 0.0, b: 0.0, c: 0.0, d: 0.0, f: 0.0 };
        let (ode, _) = build_dominating_ode(ProblemClass::Decoupled, &CoefficientBounds { c: 0.5, ..zero }, 2.0, 1.0, None).unwrap();
        assert_eq!((ode.kind, ode.quadratic, ode.terminal_value), (OdeKind::Linear, 0.0, 4.0));
        let (ode, _) = build_dominating_ode(ProblemClass::SigmaXY, &CoefficientBounds { a: 0.3, ..zero }, 1.5, 1.0, None).unwrap();
        assert_eq!((ode.quadratic, ode.linear, ode.constant, ode.terminal_value), (0.3, 0.0, 0.0, 2.25));
        let all = CoefficientBounds { a: 1.0, b: 1.0, c: 1.0, d: 1.0, f: 1.0 };
        let (ode, _) = build_dominating_ode(ProblemClass::General, &all, 1.0, 1.0, None).unwrap();
        assert_eq!((ode.quadratic, ode.linear, ode.constant), (1.5, 2.0, 1.5));
        let clean = MonotonicityReport { samples: 10, violations: 0, min_slack: 0.0 };
        let (ode, w) = build_dominating_ode(ProblemClass::DriftYSigmaX, &all, 1.0, 1.0, Some(&clean)).unwrap();
        assert_eq!((ode.kind, ode.quadratic, ode.linear, ode.constant), (OdeKind::AffineFromMonotone, 0.0, 1.5, 1.5));
        assert!(w.is_empty());
        let dirty = MonotonicityReport { samples: 10, violations: 1, min_slack: -1.0 };
        let (ode, w) = build_dominating_ode(ProblemClass::DriftYSigmaX, &all, 1.0, 1.0, Some(&dirty)).unwrap();
        assert_eq!(ode.kind, OdeKind::Riccati);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn riccati_closed_form_and_explosion() {
        for (a, c) in [(1.0, 1.0), (2.0, 0.5), (0.5, 4.0)] {
            let t = 2.0;
            let sol = integrate_backward(&DominatingODE::riccati(a, c, t), None, DEFAULT_BLOWUP_THRESHOLD).unwrap();
            assert!(sol.exploded);
            assert!((sol.t_max.unwrap() - (t - 1.0 / (a * c))).abs() < 1e-3);
            for (ti, yi) in sol.times.iter().zip(&sol.y) {
                if a * c * (t - ti) <= 0.9 {
                    let exact = c / (1.0 - a * c * (t - ti));
                    assert!((yi / exact - 1.0).abs() < 1e-6);
                }
            }
            assert!(sol.y[0] > DEFAULT_BLOWUP_THRESHOLD);
            assert_eq!(*sol.y.last().unwrap(), c);
        }
    }

    #[test]
    fn linear_closed_form() {
        let (b, f, c, t) = (0.7, 0.3, 1.2, 3.0);
        let ode = DominatingODE { kind: OdeKind::Linear, quadratic: 0.0, linear: b, constant: f, terminal_value: c, horizon: t };
        let sol = integrate_backward(&ode, None, DEFAULT_BLOWUP_THRESHOLD).unwrap();
        assert!(!sol.exploded);
        for (ti, yi) in sol.times.iter().zip(&sol.y) {
            let e = (b * (t - ti)).exp();
            let exact = c * e + f / b * (e - 1.0);
            assert!((yi - exact).abs() < 1e-8 * exact.max(1.0));
        }
        assert_eq!(sol.times[0], 0.0);
    }

    #[test]
    fn zero_rhs_is_constant() {
        let ode = DominatingODE { kind: OdeKind::Linear, quadratic: 0.0, linear: 0.0, constant: 0.0, terminal_value: 2.0, horizon: 1.0 };
        let sol = integrate_backward(&ode, Some(100), DEFAULT_BLOWUP_THRESHOLD).unwrap();
        assert!(sol.y.iter().all(|v| *v == 2.0));
        assert!(sol.t_max.is_none());
    }

    #[test]
    fn comparison_of_ordered_right_hand_sides() {
        let lo = DominatingODE { kind: OdeKind::Riccati, quadratic: 0.5, linear: 0.2, constant: 0.1, terminal_value: 1.0, horizon: 1.0 };
        let hi = DominatingODE { quadratic: 0.6, linear: 0.3, ..lo };
        let s1 = integrate_backward(&lo, None, DEFAULT_BLOWUP_THRESHOLD).unwrap();
        let s2 = integrate_backward(&hi, None, DEFAULT_BLOWUP_THRESHOLD).unwrap();
        let common = s1.y.len().min(s2.y.len());
        let (o1, o2) = (s1.y.len() - common, s2.y.len() - common);
        for i in 0..common {
            assert!(s1.y[o1 + i] <= s2.y[o2 + i] + 1e-8);
        }
    }

    #[test]
    fn riccati_schedule_is_nonincreasing_in_time() {
        let ode = DominatingODE { kind: OdeKind::Riccati, quadratic: 0.4, linear: 0.3, constant: 0.2, terminal_value: 1.0, horizon: 1.0 };
        let sol = integrate_backward(&ode, None, DEFAULT_BLOWUP_THRESHOLD).unwrap();
        for w in sol.k_schedule.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(sol.k_at(0.5) >= sol.k_at(0.5 + 1e-3));
    }

    #[test]
    fn nan_is_an_error() {
        let ode = DominatingODE { kind: OdeKind::Linear, quadratic: 0.0, linear: f64::NAN, constant: 0.0, terminal_value: 1.0, horizon: 1.0 };
        assert!(matches!(integrate_backward(&ode, Some(10), 1e8), Err(OdeError::NonFinite(_))));
    }

    #[test]
    fn zero_k0_schedule() {
        let l = LipschitzData::new(0.0, 1.5, 0.0).unwrap();
        let r = t_max_for_lipschitz(&l, ProblemClass::General, 1, 1, 2.0, None).unwrap();
        assert!(r.t_max.is_none());
        // G(y) = y from the |β|² term: K_t = K1·e^{(T−t)/2}.
        for (t, k) in r.solution.times.iter().zip(&r.solution.k_schedule).step_by(500) {
            let exact = 1.5 * ((2.0 - t) / 2.0).exp();
            assert!((k - exact).abs() < 1e-9 * exact);
        }
    }

    #[test]
    fn fromm_imkeller_horizon() {
        let p = registry::fromm_imkeller(&RegistryParams::default()).unwrap();
        let r = t_max_for_lipschitz(&p.lipschitz, p.declared_class, 1, 1, 1.0, None).unwrap();
        // G = y² + 2y from y_T = 1 explodes after ln(3)/2.
        let len = r.explosion_length.unwrap();
        assert!((len - 3f64.ln() / 2.0).abs() < 1e-4, "{len}");
        let r = t_max_for_lipschitz(&p.lipschitz, p.declared_class, 1, 1, 0.5, None).unwrap();
        assert!(r.t_max.is_none());
    }

    #[test]
    fn halving_constants_never_shortens_horizon() {
        let horizon = |k0: f64, k1: f64| {
            let partials = PartialLipschitz { b_y: Some(k0), ..Default::default() };
            let l = LipschitzData::new(k0, k1, 0.0).unwrap().with_partials(partials).unwrap();
            t_max_for_lipschitz(&l, ProblemClass::SigmaXY, 1, 1, 5.0, None).unwrap().explosion_length.unwrap_or(f64::INFINITY)
        };
        assert!(horizon(0.5, 0.5) >= horizon(1.0, 1.0));
        assert!(horizon(1.0, 1.0) >= horizon(2.0, 2.0));
    }
}
