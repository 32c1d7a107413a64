//! Built-in problems addressable by name.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{FBSDEProblem, FnCoefficients, LipschitzData, PartialLipschitz, ProblemClass, ProblemError};
use crate::path_space::PathView;

/// Names accepted by [`build`].
pub const NAMES: [&str; 4] = ["fromm_imkeller", "delarue", "decoupled_brownian", "integral_terminal"];

/// Numeric parameters shared by registry constructors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistryParams {
    /// Horizon; only `integral_terminal` depends on it (through its terminal constant).
    pub horizon: f64,
    pub x0: Option<f64>,
    /// Diffusion offset of the `delarue` problem.
    pub k: Option<f64>,
}

impl Default for RegistryParams {
    fn default() -> Self {
        Self { horizon: 1.0, x0: None, k: None }
    }
}

pub fn build(name: &str, params: &RegistryParams) -> Result<FBSDEProblem, ProblemError> {
    match name {
        "fromm_imkeller" => fromm_imkeller(params),
        "delarue" => delarue(params),
        "decoupled_brownian" => decoupled_brownian(params),
        "integral_terminal" => integral_terminal(params),
        other => Err(ProblemError::UnknownProblem(other.to_string())),
    }
}

fn terminal_state() -> Box<super::TerminalFn> {
    Box::new(|x: &PathView, out: &mut [f64]| out[0] = x.current()[0])
}

/// `dX = Y dt`, `dY = Z dW`, `Y_T = X_T`; the field is `u(t, x) = x/(1 − (T − t))` for `T < 1`.
pub fn fromm_imkeller(params: &RegistryParams) -> Result<FBSDEProblem, ProblemError> {
    let coeffs = FnCoefficients {
        drift: Some(Box::new(|_x: &PathView, y: &[f64], _z: &[f64], out: &mut [f64]| out[0] = y[0])),
        terminal: Some(terminal_state()),
        ..Default::default()
    };
    let partials = PartialLipschitz {
        b_x: Some(0.0),
        b_y: Some(1.0),
        b_z: Some(0.0),
        sigma_x: Some(0.0),
        sigma_y: Some(0.0),
        f_x: Some(0.0),
        f_y: Some(0.0),
        f_z: Some(0.0),
    };
    let l = LipschitzData::new(1.0, 1.0, 0.0)?.with_partials(partials)?;
    FBSDEProblem::new("fromm_imkeller", 1, 1, vec![params.x0.unwrap_or(1.0)], l, ProblemClass::DriftYSigmaX, Arc::new(coeffs))
}

/// `dX = (k + Z) dW`, `Y_T = X_T`: the diffusion's z-gradient equals the terminal constant.
pub fn delarue(params: &RegistryParams) -> Result<FBSDEProblem, ProblemError> {
    let k = params.k.unwrap_or(0.0);
    let coeffs = FnCoefficients {
        diffusion: Some(Box::new(move |_x: &PathView, _y: &[f64], z: &[f64], out: &mut [f64]| out[0] = k + z[0])),
        terminal: Some(terminal_state()),
        ..Default::default()
    };
    let partials = PartialLipschitz {
        b_x: Some(0.0),
        b_y: Some(0.0),
        b_z: Some(0.0),
        sigma_x: Some(0.0),
        sigma_y: Some(0.0),
        f_x: Some(0.0),
        f_y: Some(0.0),
        f_z: Some(0.0),
    };
    let l = LipschitzData::new(1.0, 1.0, 1.0)?.with_partials(partials)?;
    FBSDEProblem::new("delarue", 1, 1, vec![params.x0.unwrap_or(0.0)], l, ProblemClass::General, Arc::new(coeffs))
}

fn unit_diffusion() -> Box<super::CoefficientFn> {
    Box::new(|_x: &PathView, _y: &[f64], _z: &[f64], out: &mut [f64]| out[0] = 1.0)
}

/// `dX = dW`, `f = 0`, `Y_T = X_T`.
pub fn decoupled_brownian(params: &RegistryParams) -> Result<FBSDEProblem, ProblemError> {
    let coeffs = FnCoefficients { diffusion: Some(unit_diffusion()), terminal: Some(terminal_state()), ..Default::default() };
    let l = LipschitzData::new(0.0, 1.0, 0.0)?;
    FBSDEProblem::new("decoupled_brownian", 1, 1, vec![params.x0.unwrap_or(0.0)], l, ProblemClass::Decoupled, Arc::new(coeffs))
}

/// `dX = dW`, `f = 0`, `Y_T = X_T + ∫₀ᵀ X ds` (left rectangles on the simulation grid).
pub fn integral_terminal(params: &RegistryParams) -> Result<FBSDEProblem, ProblemError> {
    let coeffs = FnCoefficients {
        diffusion: Some(unit_diffusion()),
        terminal: Some(Box::new(|x: &PathView, out: &mut [f64]| {
            let mut integral = [0.0];
            x.running_integral(&mut integral);
            out[0] = x.current()[0] + integral[0];
        })),
        ..Default::default()
    };
    // |Δg| ≤ |Δx_T| + √T·(∫|Δx|²)^{1/2} ≤ √(1+T)·‖Δx‖_{2,T}.
    let l = LipschitzData::new(0.0, (1.0 + params.horizon).sqrt(), 0.0)?;
    Ok(FBSDEProblem::new("integral_terminal", 1, 1, vec![params.x0.unwrap_or(0.0)], l, ProblemClass::Decoupled, Arc::new(coeffs))?
        .path_dependent(true))
}

/// `dX = Y dt`, `f = −x`, `Y_T = −X_T`: drift increasing in `y` with the sign
/// structure that makes the monotonicity inequality hold.
pub fn monotone_example(params: &RegistryParams) -> Result<FBSDEProblem, ProblemError> {
    let coeffs = FnCoefficients {
        drift: Some(Box::new(|_x: &PathView, y: &[f64], _z: &[f64], out: &mut [f64]| out[0] = y[0])),
        driver: Some(Box::new(|x: &PathView, _y: &[f64], _z: &[f64], out: &mut [f64]| out[0] = -x.current()[0])),
        terminal: Some(Box::new(|x: &PathView, out: &mut [f64]| out[0] = -x.current()[0])),
        ..Default::default()
    };
    let partials = PartialLipschitz {
        b_x: Some(0.0),
        b_z: Some(0.0),
        sigma_x: Some(0.0),
        sigma_y: Some(0.0),
        f_y: Some(0.0),
        f_z: Some(0.0),
        ..Default::default()
    };
    let l = LipschitzData::new(1.0, 1.0, 0.0)?.with_partials(partials)?;
    FBSDEProblem::new("monotone_example", 1, 1, vec![params.x0.unwrap_or(1.0)], l, ProblemClass::DriftYSigmaX, Arc::new(coeffs))
}

/// Every coefficient identically zero.
pub fn zero_problem(d: usize, n: usize) -> Result<FBSDEProblem, ProblemError> {
    let l = LipschitzData::new(0.0, 0.0, 0.0)?;
    FBSDEProblem::new("zero", d, n, vec![0.0; d], l, ProblemClass::Decoupled, Arc::new(FnCoefficients::default()))
}
