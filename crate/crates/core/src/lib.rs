//! Numerical lab for path-dependent forward-backward SDEs.

pub mod path_space;
pub mod problem;
pub mod sde_engine;
pub mod bsde_engine;
pub mod picard_solver;
pub mod step_planner;
pub mod dominating_ode;
pub mod global_solver;
pub mod stability;
pub mod cli;
