//! Problem definition: coefficient functionals, Lipschitz data, structural class
//! and the admissibility checks run before solving.

pub mod registry;

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::path_space::{sq_norm, PathView, TimeGrid};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("invalid Lipschitz data: {0}")]
    InvalidLipschitz(String),
    #[error("declared class {declared} contradicted by probe: {violation}")]
    ClassInconsistent { declared: ProblemClass, violation: ProbeViolation },
    #[error("operation requires class {expected}, problem is declared {found}")]
    WrongClass { expected: ProblemClass, found: ProblemClass },
    #[error("probe budget must be at least 1")]
    EmptyBudget,
    #[error("unknown problem '{0}'")]
    UnknownProblem(String),
}

/// Signature shared by drift, diffusion and driver: `(path prefix, y, z, out)`.
/// `z` is `n×n` row-major; the diffusion writes `d×n` row-major.
pub type CoefficientFn = dyn Fn(&PathView, &[f64], &[f64], &mut [f64]) + Send + Sync;
/// Terminal functional of the full path.
pub type TerminalFn = dyn Fn(&PathView, &mut [f64]) + Send + Sync;

/// The four coefficient functionals. Implementations must be deterministic and
/// must overwrite every entry of `out`.
pub trait Coefficients: Send + Sync {
    fn drift(&self, path: &PathView, y: &[f64], z: &[f64], out: &mut [f64]);
    fn diffusion(&self, path: &PathView, y: &[f64], z: &[f64], out: &mut [f64]);
    fn driver(&self, path: &PathView, y: &[f64], z: &[f64], out: &mut [f64]);
    fn terminal(&self, path: &PathView, out: &mut [f64]);
}

/// Coefficients assembled from closures; missing pieces are identically zero.
#[derive(Default)]
pub struct FnCoefficients {
    pub drift: Option<Box<CoefficientFn>>,
    pub diffusion: Option<Box<CoefficientFn>>,
    pub driver: Option<Box<CoefficientFn>>,
    pub terminal: Option<Box<TerminalFn>>,
}

fn call_or_zero(f: &Option<Box<CoefficientFn>>, path: &PathView, y: &[f64], z: &[f64], out: &mut [f64]) {
    match f {
        Some(f) => f(path, y, z, out),
        None => out.fill(0.0),
    }
}

impl Coefficients for FnCoefficients {
    fn drift(&self, path: &PathView, y: &[f64], z: &[f64], out: &mut [f64]) {
        call_or_zero(&self.drift, path, y, z, out)
    }
    fn diffusion(&self, path: &PathView, y: &[f64], z: &[f64], out: &mut [f64]) {
        call_or_zero(&self.diffusion, path, y, z, out)
    }
    fn driver(&self, path: &PathView, y: &[f64], z: &[f64], out: &mut [f64]) {
        call_or_zero(&self.driver, path, y, z, out)
    }
    fn terminal(&self, path: &PathView, out: &mut [f64]) {
        match &self.terminal {
            Some(g) => g(path, out),
            None => out.fill(0.0),
        }
    }
}

/// Structural class, ordered from most to least restrictive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemClass {
    /// b and σ ignore (y, z).
    Decoupled,
    /// b ignores z, σ ignores (y, z).
    DriftYSigmaX,
    /// σ ignores z.
    SigmaXY,
    General,
}

impl ProblemClass {
    /// Whether every problem of class `other` is also of class `self`.
    pub fn contains(self, other: ProblemClass) -> bool {
        other <= self
    }

    pub fn parse(s: &str) -> Option<ProblemClass> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "decoupled" => Some(Self::Decoupled),
            "driftysigmax" => Some(Self::DriftYSigmaX),
            "sigmaxy" => Some(Self::SigmaXY),
            "general" => Some(Self::General),
            _ => None,
        }
    }
}

impl fmt::Display for ProblemClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Decoupled => "decoupled",
            Self::DriftYSigmaX => "drift_y_sigma_x",
            Self::SigmaXY => "sigma_xy",
            Self::General => "general",
        };
        f.write_str(s)
    }
}

/// Optional finer Lipschitz constants for each partial dependence.
/// Unset entries default to `K0`; every set entry must not exceed `K0`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PartialLipschitz {
    pub b_x: Option<f64>,
    pub b_y: Option<f64>,
    pub b_z: Option<f64>,
    pub sigma_x: Option<f64>,
    pub sigma_y: Option<f64>,
    pub f_x: Option<f64>,
    pub f_y: Option<f64>,
    pub f_z: Option<f64>,
}

/// Lipschitz constants per partial dependence after applying class structure.
/// Each caps the per-coordinate difference quotient of the named coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientBounds {
    pub b_x: f64,
    pub b_y: f64,
    pub b_z: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_z: f64,
    pub f_x: f64,
    pub f_y: f64,
    pub f_z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzData {
    pub k0: f64,
    pub k1: f64,
    pub grad_z_sigma: f64,
    #[serde(default)]
    pub partials: PartialLipschitz,
}

impl LipschitzData {
    pub fn new(k0: f64, k1: f64, grad_z_sigma: f64) -> Result<Self, ProblemError> {
        Self { k0, k1, grad_z_sigma, partials: PartialLipschitz::default() }.validated()
    }

    pub fn with_partials(mut self, partials: PartialLipschitz) -> Result<Self, ProblemError> {
        self.partials = partials;
        self.validated()
    }

    fn validated(self) -> Result<Self, ProblemError> {
        let all = [self.k0, self.k1, self.grad_z_sigma];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ProblemError::InvalidLipschitz("constants must be finite and nonnegative".into()));
        }
        if self.grad_z_sigma > self.k0 {
            return Err(ProblemError::InvalidLipschitz(format!(
                "|∇zσ| = {} exceeds K0 = {}",
                self.grad_z_sigma, self.k0
            )));
        }
        let p = &self.partials;
        for v in [p.b_x, p.b_y, p.b_z, p.sigma_x, p.sigma_y, p.f_x, p.f_y, p.f_z].into_iter().flatten() {
            if !v.is_finite() || v < 0.0 || v > self.k0 {
                return Err(ProblemError::InvalidLipschitz(format!("partial constant {v} outside [0, K0]")));
            }
        }
        Ok(self)
    }

    /// Partial constants with structural zeros implied by `class`.
    pub fn gradient_bounds(&self, class: ProblemClass) -> GradientBounds {
        let p = &self.partials;
        let k = self.k0;
        let mut g = GradientBounds {
            b_x: p.b_x.unwrap_or(k),
            b_y: p.b_y.unwrap_or(k),
            b_z: p.b_z.unwrap_or(k),
            sigma_x: p.sigma_x.unwrap_or(k),
            sigma_y: p.sigma_y.unwrap_or(k),
            sigma_z: self.grad_z_sigma,
            f_x: p.f_x.unwrap_or(k),
            f_y: p.f_y.unwrap_or(k),
            f_z: p.f_z.unwrap_or(k),
        };
        if class <= ProblemClass::SigmaXY {
            g.sigma_z = 0.0;
        }
        if class <= ProblemClass::DriftYSigmaX {
            g.b_z = 0.0;
            g.sigma_y = 0.0;
        }
        if class == ProblemClass::Decoupled {
            g.b_y = 0.0;
        }
        g
    }
}

/// A path-dependent FBSDE: forward dimension `d`, backward and Brownian dimension `n`.
#[derive(Clone)]
pub struct FBSDEProblem {
    pub name: String,
    pub d: usize,
    pub n: usize,
    pub x0: Vec<f64>,
    pub lipschitz: LipschitzData,
    pub declared_class: ProblemClass,
    /// Whether coefficients look past the current state; selects the default regression basis.
    pub path_dependent: bool,
    coeffs: Arc<dyn Coefficients>,
}

impl fmt::Debug for FBSDEProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FBSDEProblem")
            .field("name", &self.name)
            .field("d", &self.d)
            .field("n", &self.n)
            .field("x0", &self.x0)
            .field("lipschitz", &self.lipschitz)
            .field("declared_class", &self.declared_class)
            .field("path_dependent", &self.path_dependent)
            .finish()
    }
}

impl FBSDEProblem {
    pub fn new(
        name: impl Into<String>,
        d: usize,
        n: usize,
        x0: Vec<f64>,
        lipschitz: LipschitzData,
        declared_class: ProblemClass,
        coeffs: Arc<dyn Coefficients>,
    ) -> Result<Self, ProblemError> {
        if d == 0 || n == 0 {
            return Err(ProblemError::Invalid("dimensions must be at least 1".into()));
        }
        if x0.len() != d || x0.iter().any(|v| !v.is_finite()) {
            return Err(ProblemError::Invalid(format!("x0 must be {d} finite values")));
        }
        let mut lipschitz = lipschitz.validated()?;
        // A class whose diffusion ignores z has no z-gradient, whatever the generic bound says.
        if declared_class <= ProblemClass::SigmaXY {
            lipschitz.grad_z_sigma = 0.0;
        }
        Ok(Self { name: name.into(), d, n, x0, lipschitz, declared_class, path_dependent: false, coeffs })
    }

    pub fn path_dependent(mut self, yes: bool) -> Self {
        self.path_dependent = yes;
        self
    }

    pub fn with_x0(mut self, x0: Vec<f64>) -> Result<Self, ProblemError> {
        if x0.len() != self.d {
            return Err(ProblemError::Invalid(format!("x0 must have {} entries", self.d)));
        }
        self.x0 = x0;
        Ok(self)
    }

    pub fn coefficients(&self) -> &Arc<dyn Coefficients> {
        &self.coeffs
    }

    pub fn drift(&self, path: &PathView, y: &[f64], z: &[f64], out: &mut [f64]) {
        self.coeffs.drift(path, y, z, out)
    }

    pub fn diffusion(&self, path: &PathView, y: &[f64], z: &[f64], out: &mut [f64]) {
        self.coeffs.diffusion(path, y, z, out)
    }

    pub fn driver(&self, path: &PathView, y: &[f64], z: &[f64], out: &mut [f64]) {
        self.coeffs.driver(path, y, z, out)
    }

    pub fn terminal(&self, path: &PathView, out: &mut [f64]) {
        self.coeffs.terminal(path, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmallTimeCheck {
    pub pass: bool,
    /// `1 − K1·|∇zσ|`.
    pub margin: f64,
}

/// Local well-posedness needs `K1·|∇zσ| < 1`.
pub fn check_small_time_condition(l: &LipschitzData) -> SmallTimeCheck {
    small_time_condition(l.k1, l.grad_z_sigma)
}

pub(crate) fn small_time_condition(k_terminal: f64, grad_z_sigma: f64) -> SmallTimeCheck {
    let product = k_terminal * grad_z_sigma;
    SmallTimeCheck { pass: product < 1.0, margin: 1.0 - product }
}

/// A probe where an argument the class says is ignored moved the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeViolation {
    pub probe: usize,
    pub coefficient: String,
    pub argument: String,
    pub grid_index: usize,
    pub change: f64,
}

impl fmt::Display for ProbeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "probe {} at grid index {}: {} changed by {:e} when {} moved",
            self.probe, self.grid_index, self.coefficient, self.change, self.argument
        )
    }
}

/// Largest observed output change per (coefficient, argument) pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub drift_y: f64,
    pub drift_z: f64,
    pub diffusion_y: f64,
    pub diffusion_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub declared: ProblemClass,
    /// Most restrictive class consistent with every probe.
    pub finest_observed: ProblemClass,
    pub probes: usize,
    pub sensitivity: Sensitivity,
    pub advisory: Option<String>,
}

const IGNORED_TOL: f64 = 1e-12;
const PROBE_STEPS: usize = 16;

/// Random path prefix, `y`, `z` for probing.
struct ProbePoint {
    grid: TimeGrid,
    path: Vec<f64>,
    k: usize,
    y: Vec<f64>,
    z: Vec<f64>,
}

impl ProbePoint {
    fn draw(p: &FBSDEProblem, rng: &mut ChaCha8Rng) -> Self {
        let grid = TimeGrid::new(0.0, 1.0, PROBE_STEPS).expect("static grid");
        let path = random_path(p, &grid, rng);
        let k = rng.random_range(0..=PROBE_STEPS);
        Self { grid, path, k, y: normals(rng, p.n), z: normals(rng, p.n * p.n) }
    }

    fn view(&self, d: usize) -> PathView<'_> {
        PathView::new(self.grid.t0(), self.grid.dt(), d, &self.path[..(self.k + 1) * d])
    }
}

fn normals(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Gaussian random walk started near `x0`, covering the whole grid.
fn random_path(p: &FBSDEProblem, grid: &TimeGrid, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = p.d;
    let sd = grid.dt().sqrt();
    let mut path = Vec::with_capacity(grid.n_points() * d);
    for i in 0..d {
        path.push(p.x0[i] + rng.sample::<f64, _>(StandardNormal));
    }
    for k in 1..grid.n_points() {
        for i in 0..d {
            let prev = path[(k - 1) * d + i];
            path.push(prev + sd * rng.sample::<f64, _>(StandardNormal));
        }
    }
    path
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Checks the declared class by perturbing the arguments it claims are ignored.
pub fn classify(p: &FBSDEProblem, probe_budget: usize, seed: u64) -> Result<ClassReport, ProblemError> {
    if probe_budget == 0 {
        return Err(ProblemError::EmptyBudget);
    }
    let (d, n) = (p.d, p.n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sens = Sensitivity::default();
    let mut b0 = vec![0.0; d];
    let mut b1 = vec![0.0; d];
    let mut s0 = vec![0.0; d * n];
    let mut s1 = vec![0.0; d * n];
    for probe in 0..probe_budget {
        let pt = ProbePoint::draw(p, &mut rng);
        let y2 = normals(&mut rng, n);
        let z2 = normals(&mut rng, n * n);
        let view = pt.view(d);
        p.drift(&view, &pt.y, &pt.z, &mut b0);
        p.diffusion(&view, &pt.y, &pt.z, &mut s0);

        let mut changes = [0.0; 4];
        p.drift(&view, &y2, &pt.z, &mut b1);
        changes[0] = max_abs_diff(&b0, &b1);
        p.drift(&view, &pt.y, &z2, &mut b1);
        changes[1] = max_abs_diff(&b0, &b1);
        p.diffusion(&view, &y2, &pt.z, &mut s1);
        changes[2] = max_abs_diff(&s0, &s1);
        p.diffusion(&view, &pt.y, &z2, &mut s1);
        changes[3] = max_abs_diff(&s0, &s1);

        sens.drift_y = sens.drift_y.max(changes[0]);
        sens.drift_z = sens.drift_z.max(changes[1]);
        sens.diffusion_y = sens.diffusion_y.max(changes[2]);
        sens.diffusion_z = sens.diffusion_z.max(changes[3]);

        let labels = [("drift", "y"), ("drift", "z"), ("diffusion", "y"), ("diffusion", "z")];
        for (slot, &change) in changes.iter().enumerate() {
            if change > IGNORED_TOL && class_ignores(p.declared_class, slot) {
                return Err(ProblemError::ClassInconsistent {
                    declared: p.declared_class,
                    violation: ProbeViolation {
                        probe,
                        coefficient: labels[slot].0.into(),
                        argument: labels[slot].1.into(),
                        grid_index: pt.k,
                        change,
                    },
                });
            }
        }
    }
    let finest = finest_class(&sens);
    let advisory = (finest < p.declared_class).then(|| {
        format!("declared {} but every probe is consistent with the narrower class {}", p.declared_class, finest)
    });
    Ok(ClassReport { declared: p.declared_class, finest_observed: finest, probes: probe_budget, sensitivity: sens, advisory })
}

/// Slots: 0 drift/y, 1 drift/z, 2 diffusion/y, 3 diffusion/z.
fn class_ignores(class: ProblemClass, slot: usize) -> bool {
    match class {
        ProblemClass::Decoupled => true,
        ProblemClass::DriftYSigmaX => slot != 0,
        ProblemClass::SigmaXY => slot == 3,
        ProblemClass::General => false,
    }
}

fn finest_class(s: &Sensitivity) -> ProblemClass {
    let moved = |v: f64| v > IGNORED_TOL;
    if moved(s.diffusion_z) {
        ProblemClass::General
    } else if moved(s.diffusion_y) || moved(s.drift_z) {
        ProblemClass::SigmaXY
    } else if moved(s.drift_y) {
        ProblemClass::DriftYSigmaX
    } else {
        ProblemClass::Decoupled
    }
}

/// Samples difference quotients and warns when one exceeds the declared constant by more than 1%.
pub fn probe_lipschitz(p: &FBSDEProblem, probe_budget: usize, seed: u64) -> Vec<String> {
    let (d, n) = (p.d, p.n);
    let l = &p.lipschitz;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 5];
    let mut out0 = vec![0.0; d * n];
    let mut out1 = vec![0.0; d * n];
    for _ in 0..probe_budget {
        let a = ProbePoint::draw(p, &mut rng);
        let scale = 10f64.powf(rng.random_range(-3.0..0.0));
        let b_path: Vec<f64> = a.path.iter().map(|v| v + scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let y2: Vec<f64> = a.y.iter().map(|v| v + scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let z2: Vec<f64> = a.z.iter().map(|v| v + scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let va = a.view(d);
        let vb = PathView::new(a.grid.t0(), a.grid.dt(), d, &b_path[..(a.k + 1) * d]);
        let diff: Vec<f64> = va.values().iter().zip(vb.values()).map(|(x, y)| x - y).collect();
        let dx = PathView::new(a.grid.t0(), a.grid.dt(), d, &diff).norm_sq().sqrt();
        let dy = max_norm_diff(&a.y, &y2);
        let dz = max_norm_diff(&a.z, &z2);
        let sep = dx + dy + dz;
        if sep <= 0.0 {
            continue;
        }
        let evals: [(usize, usize, fn(&FBSDEProblem, &PathView, &[f64], &[f64], &mut [f64])); 3] = [
            (0, d, FBSDEProblem::drift),
            (1, d * n, FBSDEProblem::diffusion),
            (2, n, FBSDEProblem::driver),
        ];
        for (slot, len, eval) in evals {
            eval(p, &va, &a.y, &a.z, &mut out0[..len]);
            eval(p, &vb, &y2, &z2, &mut out1[..len]);
            worst[slot] = worst[slot].max(max_norm_diff(&out0[..len], &out1[..len]) / sep);
        }
        if dz > 0.0 {
            p.diffusion(&va, &a.y, &a.z, &mut out0);
            p.diffusion(&va, &a.y, &z2, &mut out1);
            worst[3] = worst[3].max(max_norm_diff(&out0, &out1) / dz);
        }
        let full_b = PathView::new(a.grid.t0(), a.grid.dt(), d, &b_path);
        let full_a = PathView::new(a.grid.t0(), a.grid.dt(), d, &a.path);
        let full_diff: Vec<f64> = a.path.iter().zip(&b_path).map(|(x, y)| x - y).collect();
        let dxt = PathView::new(a.grid.t0(), a.grid.dt(), d, &full_diff).norm_sq().sqrt();
        if dxt > 0.0 {
            p.terminal(&full_a, &mut out0[..n]);
            p.terminal(&full_b, &mut out1[..n]);
            worst[4] = worst[4].max(max_norm_diff(&out0[..n], &out1[..n]) / dxt);
        }
    }
    let declared = [l.k0, l.k0, l.k0, l.grad_z_sigma, l.k1];
    let names = ["drift", "diffusion", "driver", "diffusion in z", "terminal"];
    (0..5)
        .filter(|&i| worst[i] > 1.01 * declared[i])
        .map(|i| format!("{} difference quotient {:.6} exceeds declared {:.6}", names[i], worst[i], declared[i]))
        .collect()
}

fn max_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub samples: usize,
    pub violations: usize,
    pub min_slack: f64,
}

impl MonotonicityReport {
    pub fn is_clean(&self) -> bool {
        self.violations == 0
    }
}

/// One evaluation of the monotonicity inequality: left side minus right side for
/// `θ = (x, y, z)`, `θ' = (x', y', z')` at the last index of the views, with the
/// terminal term using the full paths and a matrix `b_y` (`d×n`, row-major).
#[allow(clippy::too_many_arguments)]
pub fn monotonicity_slack(
    p: &FBSDEProblem,
    x: &PathView,
    x_full: &PathView,
    xp: &PathView,
    xp_full: &PathView,
    y: (&[f64], &[f64]),
    z: (&[f64], &[f64]),
    b_y: &[f64],
) -> f64 {
    let (d, n) = (p.d, p.n);
    let mut b1 = vec![0.0; d];
    let mut b2 = vec![0.0; d];
    let mut f1 = vec![0.0; n];
    let mut f2 = vec![0.0; n];
    let mut s1 = vec![0.0; d * n];
    let mut s2 = vec![0.0; d * n];
    let mut g1 = vec![0.0; n];
    let mut g2 = vec![0.0; n];
    p.drift(x, y.0, z.0, &mut b1);
    p.drift(xp, y.1, z.1, &mut b2);
    p.driver(x, y.0, z.0, &mut f1);
    p.driver(xp, y.1, z.1, &mut f2);
    p.diffusion(x, y.0, z.0, &mut s1);
    p.diffusion(xp, y.1, z.1, &mut s2);
    p.terminal(x_full, &mut g1);
    p.terminal(xp_full, &mut g2);

    let dy: Vec<f64> = y.0.iter().zip(y.1).map(|(a, b)| a - b).collect();
    let dz: Vec<f64> = z.0.iter().zip(z.1).map(|(a, b)| a - b).collect();
    let dxt: Vec<f64> = x.current().iter().zip(xp.current()).map(|(a, b)| a - b).collect();
    let dx_end: Vec<f64> = x_full.current().iter().zip(xp_full.current()).map(|(a, b)| a - b).collect();

    // (Δb)ᵀ b_y Δy
    let mut lhs = 0.0;
    for i in 0..d {
        let row: f64 = (0..n).map(|k| b_y[i * n + k] * dy[k]).sum();
        lhs += (b1[i] - b2[i]) * row;
    }
    // − (Δf)ᵀ b_yᵀ Δx_t
    for k in 0..n {
        let col: f64 = (0..d).map(|i| b_y[i * n + k] * dxt[i]).sum();
        lhs -= (f1[k] - f2[k]) * col;
    }
    // Tr((Δσ)ᵀ b_y Δz) = Σ_{i,j,l} Δσ[i,j] b_y[i,l] Δz[l,j]
    for i in 0..d {
        for j in 0..n {
            let inner: f64 = (0..n).map(|l| b_y[i * n + l] * dz[l * n + j]).sum();
            lhs += (s1[i * n + j] - s2[i * n + j]) * inner;
        }
    }
    // (Δg)ᵀ b_yᵀ Δx_T
    let mut rhs = 0.0;
    for k in 0..n {
        let col: f64 = (0..d).map(|i| b_y[i * n + k] * dx_end[i]).sum();
        rhs += (g1[k] - g2[k]) * col;
    }
    lhs - rhs
}

/// Difference-quotient matrix of the drift in `y` (`d×n`) between `y1` and `y2`
/// on the same path, by coordinate-wise telescoping. Coordinates with no
/// separation contribute a zero column.
pub fn drift_y_quotient(p: &FBSDEProblem, x: &PathView, y1: &[f64], y2: &[f64], z: &[f64]) -> Vec<f64> {
    let (d, n) = (p.d, p.n);
    let mut out = vec![0.0; d * n];
    let mut cur = y1.to_vec();
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    for k in 0..n {
        let h = y1[k] - y2[k];
        p.drift(x, &cur, z, &mut a);
        cur[k] = y2[k];
        if h == 0.0 {
            continue;
        }
        p.drift(x, &cur, z, &mut b);
        for i in 0..d {
            out[i * n + k] = (a[i] - b[i]) / h;
        }
    }
    out
}

/// Monte Carlo spot-check of the monotonicity inequality for drift-in-y problems.
pub fn check_monotonicity_condition(p: &FBSDEProblem, n_samples: usize, seed: u64) -> Result<MonotonicityReport, ProblemError> {
    if p.declared_class != ProblemClass::DriftYSigmaX {
        return Err(ProblemError::WrongClass { expected: ProblemClass::DriftYSigmaX, found: p.declared_class });
    }
    if n_samples == 0 {
        return Err(ProblemError::EmptyBudget);
    }
    let (d, n) = (p.d, p.n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut min_slack = f64::INFINITY;
    for _ in 0..n_samples {
        let a = ProbePoint::draw(p, &mut rng);
        let b_path = random_path(p, &a.grid, &mut rng);
        let y2 = normals(&mut rng, n);
        let z2 = normals(&mut rng, n * n);

        // A member of the b_y set: quotient on an independent path with two distinct y values.
        let c = ProbePoint::draw(p, &mut rng);
        let y3 = normals(&mut rng, n);
        let b_y = drift_y_quotient(p, &c.view(d), &c.y, &y3, &c.z);

        let grid = a.grid;
        let len = (a.k + 1) * d;
        let x = PathView::new(grid.t0(), grid.dt(), d, &a.path[..len]);
        let xp = PathView::new(grid.t0(), grid.dt(), d, &b_path[..len]);
        let x_full = PathView::new(grid.t0(), grid.dt(), d, &a.path);
        let xp_full = PathView::new(grid.t0(), grid.dt(), d, &b_path);
        let slack = monotonicity_slack(p, &x, &x_full, &xp, &xp_full, (&a.y, &y2), (&a.z, &z2), &b_y);
        if slack < -IGNORED_TOL * (1.0 + sq_norm(&b_y)) {
            violations += 1;
        }
        min_slack = min_slack.min(slack);
    }
    Ok(MonotonicityReport { samples: n_samples, violations, min_slack })
}

#[cfg(test)]
mod tests {
    use super::registry::{self, RegistryParams};
    use super::*;
    use proptest::prelude::*;

    fn params() -> RegistryParams {
        RegistryParams::default()
    }

    #[test]
    fn registry_classes_are_consistent() {
        let fi = registry::fromm_imkeller(&params()).unwrap();
        let r = classify(&fi, 200, 1).unwrap();
        assert_eq!(r.declared, ProblemClass::DriftYSigmaX);
        assert_eq!(r.finest_observed, ProblemClass::DriftYSigmaX);
        assert!(r.advisory.is_none());

        let del = registry::delarue(&RegistryParams { k: Some(0.5), ..params() }).unwrap();
        assert_eq!(classify(&del, 200, 2).unwrap().finest_observed, ProblemClass::General);
    }

    #[test]
    fn coarser_declaration_gets_an_advisory() {
        let mut p = registry::decoupled_brownian(&params()).unwrap();
        p.declared_class = ProblemClass::SigmaXY;
        let r = classify(&p, 100, 3).unwrap();
        assert_eq!(r.finest_observed, ProblemClass::Decoupled);
        assert!(r.advisory.is_some());
    }

    #[test]
    fn too_narrow_declaration_is_rejected() {
        let mut p = registry::fromm_imkeller(&params()).unwrap();
        p.declared_class = ProblemClass::Decoupled;
        match classify(&p, 50, 4) {
            Err(ProblemError::ClassInconsistent { violation, .. }) => {
                assert_eq!(violation.coefficient, "drift");
                assert_eq!(violation.argument, "y");
            }
            other => panic!("expected inconsistency, got {other:?}"),
        }
        assert_eq!(classify(&p, 0, 4), Err(ProblemError::EmptyBudget));
    }

    #[test]
    fn classify_is_deterministic() {
        let p = registry::delarue(&RegistryParams { k: Some(1.0), ..params() }).unwrap();
        assert_eq!(classify(&p, 64, 9).unwrap(), classify(&p, 64, 9).unwrap());
    }

    #[test]
    fn small_time_condition_cases() {
        let delarue = LipschitzData::new(1.0, 1.0, 1.0).unwrap();
        let c = check_small_time_condition(&delarue);
        assert!(!c.pass);
        assert_eq!(c.margin, 0.0);
        assert!(check_small_time_condition(&LipschitzData::new(1.0, 37.0, 0.0).unwrap()).pass);
        let c = check_small_time_condition(&LipschitzData::new(1.0, 0.5, 1.0).unwrap());
        assert!(c.pass);
        assert_eq!(c.margin, 0.5);
    }

    #[test]
    fn lipschitz_validation() {
        assert!(LipschitzData::new(0.5, 1.0, 1.0).is_err());
        assert!(LipschitzData::new(-1.0, 1.0, 0.0).is_err());
        let bad = PartialLipschitz { b_y: Some(2.0), ..Default::default() };
        assert!(LipschitzData::new(1.0, 1.0, 0.0).unwrap().with_partials(bad).is_err());
    }

    #[test]
    fn gradient_bounds_follow_class_structure() {
        let l = LipschitzData::new(2.0, 1.0, 1.5).unwrap();
        let g = l.gradient_bounds(ProblemClass::Decoupled);
        assert_eq!((g.b_y, g.b_z, g.sigma_y, g.sigma_z), (0.0, 0.0, 0.0, 0.0));
        assert_eq!((g.b_x, g.f_z), (2.0, 2.0));
        let g = l.gradient_bounds(ProblemClass::DriftYSigmaX);
        assert_eq!((g.b_y, g.b_z, g.sigma_y, g.sigma_z), (2.0, 0.0, 0.0, 0.0));
        let g = l.gradient_bounds(ProblemClass::General);
        assert_eq!(g.sigma_z, 1.5);
    }

    #[test]
    fn monotone_problem_has_no_violations() {
        // b = y, f = −x, g = −x_T: increasing in y with the sufficient sign conditions.
        let p = registry::monotone_example(&params()).unwrap();
        let r = check_monotonicity_condition(&p, 2000, 5).unwrap();
        assert_eq!(r.violations, 0, "{r:?}");
    }

    #[test]
    fn drift_free_of_y_gives_zero_slack() {
        let coeffs = FnCoefficients {
            drift: Some(Box::new(|x: &PathView, _y: &[f64], _z: &[f64], out: &mut [f64]| out[0] = x.current()[0].sin())),
            terminal: Some(Box::new(|x: &PathView, out: &mut [f64]| out[0] = x.current()[0])),
            ..Default::default()
        };
        let p = FBSDEProblem::new(
            "no_y",
            1,
            1,
            vec![0.0],
            LipschitzData::new(1.0, 1.0, 0.0).unwrap(),
            ProblemClass::DriftYSigmaX,
            Arc::new(coeffs),
        )
        .unwrap();
        let r = check_monotonicity_condition(&p, 500, 6).unwrap();
        assert_eq!(r.violations, 0);
        assert_eq!(r.min_slack, 0.0);
    }

    #[test]
    fn hand_evaluated_violation() {
        // b = y, σ = 0, f = 0, g = x_T; x_T = 1 vs 0, y = 0.5 vs 0, b_y = 1.
        // Left side (Δb)(b_y)(Δy) = 0.25, right side (Δg)(b_y)(Δx_T) = 1, slack −0.75.
        let p = registry::fromm_imkeller(&params()).unwrap();
        let x = [1.0, 1.0, 1.0];
        let xp = [0.0, 0.0, 0.0];
        let x_full = PathView::new(0.0, 0.5, 1, &x);
        let xp_full = PathView::new(0.0, 0.5, 1, &xp);
        let (x1, xp1) = (x_full.truncate(1), xp_full.truncate(1));
        let slack = monotonicity_slack(&p, &x1, &x_full, &xp1, &xp_full, (&[0.5], &[0.0]), (&[0.0], &[0.0]), &[1.0]);
        assert!((slack + 0.75).abs() < 1e-15);

        let r = check_monotonicity_condition(&p, 500, 7).unwrap();
        assert!(r.violations > 0);
        assert!(r.min_slack < 0.0);
    }

    #[test]
    fn monotonicity_needs_the_right_class() {
        let p = registry::decoupled_brownian(&params()).unwrap();
        assert!(matches!(check_monotonicity_condition(&p, 10, 1), Err(ProblemError::WrongClass { .. })));
    }

    #[test]
    fn lipschitz_probe_flags_understated_constants() {
        let p = registry::fromm_imkeller(&params()).unwrap();
        assert!(probe_lipschitz(&p, 300, 8).is_empty());
        let mut bad = p.clone();
        bad.lipschitz = LipschitzData::new(0.5, 1.0, 0.0).unwrap();
        assert!(!probe_lipschitz(&bad, 300, 8).is_empty());
    }

    proptest! {
        #[test]
        fn small_time_condition_is_monotone(k1 in 0.0f64..4.0, gz in 0.0f64..2.0, dk in 0.0f64..2.0, dg in 0.0f64..2.0) {
            let before = small_time_condition(k1, gz);
            let after = small_time_condition(k1 + dk, gz + dg);
            prop_assert!(!( !before.pass && after.pass));
        }

        #[test]
        fn decoupled_always_passes(k0 in 0.0f64..10.0, k1 in 0.0f64..100.0, frac in 0.0f64..1.0) {
            let l = LipschitzData::new(k0, k1, frac * k0).unwrap();
            let p = FBSDEProblem::new("d", 1, 1, vec![0.0], l, ProblemClass::Decoupled, Arc::new(FnCoefficients::default())).unwrap();
            prop_assert!(check_small_time_condition(&p.lipschitz).pass);
        }
    }
}
