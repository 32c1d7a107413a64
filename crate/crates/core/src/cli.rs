//! Command-line front end: registry lookup, planning, solving, dominating-ODE
//! analysis and stability runs, with reproducible CSV/JSON output.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::dominating_ode::{integrate_backward, t_max_for_lipschitz, DominatingODE, OdeError, ODESolution, DEFAULT_BLOWUP_THRESHOLD};
use crate::global_solver::{apriori_bound_check, plan_for, solve, GlobalConfig, GlobalError, GlobalSolution};
use crate::picard_solver::{LocalConfig, PicardError};
use crate::problem::registry::{self, RegistryParams};
use crate::problem::{FBSDEProblem, LipschitzData, ProblemClass, ProblemError};
use crate::stability::{shifted, stability_report, Shift, StabilityError, StabilityReport};
use crate::step_planner::{SearchConfig, StepPlan};

pub const THREADS_ENV: &str = "FBSDE_LAB_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io { .. } => 1,
            CliError::Infeasible(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<ProblemError> for CliError {
    fn from(e: ProblemError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<OdeError> for CliError {
    fn from(e: OdeError) -> Self {
        match e {
            OdeError::Dimension(_) | OdeError::Inputs(_) | OdeError::Settings(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<GlobalError> for CliError {
    fn from(e: GlobalError) -> Self {
        match &e {
            GlobalError::Infeasible { .. } => CliError::Infeasible(e.to_string()),
            GlobalError::Local { source: PicardError::Precondition(_), .. } => CliError::Infeasible(e.to_string()),
            GlobalError::Config(_) | GlobalError::Planner(_) => CliError::Usage(e.to_string()),
            GlobalError::Ode(o) => o.clone().into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<StabilityError> for CliError {
    fn from(e: StabilityError) -> Self {
        match e {
            StabilityError::Global(g) => g.into(),
            StabilityError::Problem(p) => p.into(),
            StabilityError::RegimeMismatch { .. } => CliError::Infeasible(e.to_string()),
            StabilityError::Dimension { .. } | StabilityError::Grid => CliError::Usage(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fbsde-lab", version, about = "Numerical lab for path-dependent FBSDEs")]
pub struct Cli {
    /// Worker threads (default: all cores); FBSDE_LAB_THREADS takes precedence.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List registry problems.
    List,
    /// Plan local intervals from the dominating-ODE Lipschitz schedule.
    Plan(PlanArgs),
    /// Build the decoupling field and solve on [0, T].
    Solve(SolveArgs),
    /// Integrate a dominating ODE and report its explosion time.
    Domode(DomodeArgs),
    /// Paired solves on common noise and the empirical stability constant.
    Stability(StabilityArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ProblemArgs {
    /// Registry problem name.
    pub problem: String,
    /// Horizon.
    #[arg(long = "T", default_value_t = 1.0)]
    pub horizon: f64,
    /// Initial state (registry problems are one-dimensional).
    #[arg(long)]
    pub x0: Option<f64>,
    /// Diffusion offset of `delarue`.
    #[arg(long)]
    pub k: Option<f64>,
}

impl ProblemArgs {
    fn params(&self) -> RegistryParams {
        RegistryParams { horizon: self.horizon, x0: self.x0, k: self.k }
    }

    fn build(&self) -> Result<FBSDEProblem, CliError> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(CliError::Usage(format!("--T must be positive, got {}", self.horizon)));
        }
        Ok(registry::build(&self.problem, &self.params())?)
    }
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Directory for output files.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long, default_value_t = 0.9)]
    pub gamma_target: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_intervals: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 10_000)]
    pub paths: usize,
    /// Training paths for the field; defaults to `--paths`.
    #[arg(long)]
    pub training_paths: Option<usize>,
    /// Time steps per solve block.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub min_blocks: usize,
    #[arg(long, default_value_t = 5)]
    pub max_blocks: usize,
    /// Fixed number of solve blocks.
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Spread of training initial states around x0.
    #[arg(long, default_value_t = 1.0)]
    pub spread: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 50)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 10_000)]
    pub max_intervals: usize,
}

impl SolverArgs {
    fn config(&self) -> GlobalConfig {
        GlobalConfig {
            steps_per_interval: self.steps,
            n_paths: self.paths,
            training_paths: self.training_paths,
            seed: self.seed,
            min_blocks: self.min_blocks,
            max_blocks: self.max_blocks,
            force_blocks: self.blocks,
            initial_spread: self.spread,
            local: LocalConfig { tol_fixed_point: self.tol, max_iters: self.max_iters, ..Default::default() },
            search: SearchConfig { max_intervals: self.max_intervals, ..Default::default() },
            monotonicity: None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct DomodeArgs {
    /// Registry problem; omit to build the ODE from flags only.
    pub problem: Option<String>,
    #[arg(long = "T", default_value_t = 1.0)]
    pub horizon: f64,
    /// Pure Riccati `ẏ = −a·y²`, `y_T = c`, given as `a=.. c=..`.
    #[arg(long, num_args = 2, value_names = ["a=..", "c=.."])]
    pub riccati: Option<Vec<String>>,
    #[arg(long = "K0")]
    pub k0: Option<f64>,
    #[arg(long = "K1")]
    pub k1: Option<f64>,
    /// Bound on the diffusion's z-gradient.
    #[arg(long = "gz")]
    pub grad_z_sigma: Option<f64>,
    /// Problem class (decoupled, drift_y_sigma_x, sigma_xy, general).
    #[arg(long)]
    pub class: Option<String>,
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long, default_value_t = crate::dominating_ode::DEFAULT_ODE_STEPS)]
    pub ode_steps: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct StabilityArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Perturbed problem (defaults to the baseline problem).
    #[arg(long)]
    pub against: Option<String>,
    /// Initial state of the baseline run (defaults to --x0).
    #[arg(long)]
    pub x0_prime: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub shift_f: f64,
    #[arg(long, default_value_t = 0.0)]
    pub shift_b: f64,
    #[arg(long, default_value_t = 0.0)]
    pub shift_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub shift_g: f64,
    /// Driver shifts to sweep, comma separated; replaces --shift-f.
    #[arg(long, value_delimiter = ',')]
    pub sweep_f: Option<Vec<f64>>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
            let _ = if code == 0 { write!(stdout, "{}", e.render()) } else { write!(stderr, "{}", e.render()) };
            return code;
        }
    };
    if let Err(e) = configure_threads(cli.threads) {
        let _ = writeln!(stderr, "error: {e}");
        return e.exit_code();
    }
    match execute(&cli.command, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads(flag: Option<usize>) -> Result<(), CliError> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a thread count, got {v:?}")))?),
        Err(_) => flag,
    };
    if let Some(n) = threads {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn execute(cmd: &Command, out: &mut dyn Write) -> Result<i32, CliError> {
    match cmd {
        Command::List => {
            for name in registry::NAMES {
                let p = registry::build(name, &RegistryParams::default())?;
                emit(out, format!("{name}\tclass={}\td={}\tn={}", p.declared_class, p.d, p.n));
            }
            Ok(0)
        }
        Command::Plan(a) => cmd_plan(a, out),
        Command::Solve(a) => cmd_solve(a, out),
        Command::Domode(a) => cmd_domode(a, out),
        Command::Stability(a) => cmd_stability(a, out),
    }
}

fn emit(out: &mut dyn Write, line: String) {
    let _ = writeln!(out, "{line}");
}

/// `serde_json::Value` keeps object keys sorted, which fixes the byte layout.
fn to_sorted_json<S: Serialize>(v: &S) -> String {
    let value = serde_json::to_value(v).expect("serializable");
    let mut s = serde_json::to_string_pretty(&value).expect("serializable");
    s.push('\n');
    s
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<String, CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| CliError::Io { path: path.clone(), source })?;
    Ok(name.to_string())
}

fn write_manifest(dir: &Path, command: &str, mut body: Value, outputs: Vec<String>, started: Instant) -> Result<(), CliError> {
    let obj = body.as_object_mut().expect("manifest body is an object");
    obj.insert("command".into(), json!(command));
    obj.insert("outputs".into(), json!(outputs));
    obj.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
    obj.insert("wall_clock_seconds".into(), json!(started.elapsed().as_secs_f64()));
    write_file(dir, "manifest.json", &to_sorted_json(&body))?;
    Ok(())
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_else(|| "none".into())
}

fn cmd_plan(a: &PlanArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let started = Instant::now();
    let p = a.problem.build()?;
    let cfg = GlobalConfig {
        search: SearchConfig { gamma_target: a.gamma_target, max_intervals: a.max_intervals, ..Default::default() },
        ..Default::default()
    };
    let (plan, lip) = plan_for(&p, a.problem.horizon, &cfg)?;
    emit(out, format!("problem: {}", p.name));
    emit(out, format!("feasible: {}", plan.feasible));
    emit(out, format!("intervals: {}", plan.n_intervals()));
    emit(out, format!("t_max: {}", opt_num(lip.t_max)));
    if !plan.feasible {
        emit(out, format!("blocking_time: {}", opt_num(plan.blocking_time)));
        emit(out, format!("reason: {}", plan.reason.clone().unwrap_or_default()));
    }
    if let Some(dir) = &a.out.out {
        let body = json!({ "plan": plan, "dominating_ode": lip.ode, "t_max": lip.t_max, "warnings": lip.warnings });
        let f = write_file(dir, "plan.json", &to_sorted_json(&body))?;
        let manifest = json!({
            "problem": p.name,
            "parameters": a.problem.params(),
            "search": plan.search,
            "plan_summary": plan_summary(&plan),
        });
        write_manifest(dir, "plan", manifest, vec![f], started)?;
    }
    Ok(if plan.feasible { 0 } else { 2 })
}

fn plan_summary(plan: &StepPlan) -> Value {
    json!({
        "feasible": plan.feasible,
        "n_intervals": plan.n_intervals(),
        "min_interval_length": plan.min_interval_length(),
        "max_k": plan.max_k(),
        "blocking_time": plan.blocking_time,
        "reason": plan.reason,
    })
}

/// Rows `t, y_mean_i, y_std_i, z_frob_mean, junction_gap`; `Z` and the gap are
/// blank where undefined.
pub fn solution_csv(sol: &GlobalSolution) -> String {
    let n = sol.n;
    let mut s = String::from("t");
    for i in 0..n {
        s.push_str(&format!(",y_mean_{i}"));
    }
    for i in 0..n {
        s.push_str(&format!(",y_std_{i}"));
    }
    s.push_str(",z_frob_mean,junction_gap\n");
    let n_steps = sol.grid.n_steps();
    for k in 0..=n_steps {
        let (mean, std) = sol.y_stats(k);
        let mut row = num(sol.grid.time(k));
        for v in mean.iter().chain(&std) {
            row.push(',');
            row.push_str(&num(*v));
        }
        row.push(',');
        if k < n_steps {
            row.push_str(&num(sol.z_frob_mean(k)));
        }
        row.push(',');
        if let Some(j) = sol.junctions.iter().find(|j| j.index == k) {
            row.push_str(&num(j.rms));
        }
        s.push_str(&row);
        s.push('\n');
    }
    s
}

fn cmd_solve(a: &SolveArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let started = Instant::now();
    let p = a.problem.build()?;
    let cfg = a.solver.config();
    let (field, sol) = solve(&p, a.problem.horizon, &cfg)?;
    let (y0, _) = sol.y_stats(0);
    let n_steps = sol.grid.n_steps();
    let z_mean = (0..n_steps).map(|k| sol.z_frob_mean(k)).sum::<f64>() / n_steps as f64;
    let apriori = apriori_bound_check(&sol, &p);
    emit(out, format!("problem: {}", p.name));
    emit(out, format!("blocks: {}", field.n_blocks()));
    emit(out, format!("steps: {n_steps}"));
    emit(out, format!("y0_mean: {}", y0.iter().map(|v| num(*v)).collect::<Vec<_>>().join(",")));
    emit(out, format!("z_frob_mean: {}", num(z_mean)));
    emit(out, format!("max_junction_gap: {}", opt_num(sol.max_junction_gap())));
    emit(out, format!("apriori_ratio: {}", opt_num(apriori.ratio)));
    if let Some(dir) = &a.out.out {
        let f = write_file(dir, "solution.csv", &solution_csv(&sol))?;
        let manifest = json!({
            "problem": p.name,
            "parameters": a.problem.params(),
            "grid": { "horizon": a.problem.horizon, "n_steps": n_steps, "steps_per_block": cfg.steps_per_interval, "n_blocks": field.n_blocks() },
            "seeds": { "base": cfg.seed, "training_paths": field.training_paths, "paths": cfg.n_paths },
            "solver": {
                "min_blocks": cfg.min_blocks, "max_blocks": cfg.max_blocks, "force_blocks": cfg.force_blocks,
                "initial_spread": cfg.initial_spread, "tol": cfg.local.tol_fixed_point, "max_iters": cfg.local.max_iters,
                "max_intervals": cfg.search.max_intervals,
            },
            "plan_summary": plan_summary(&field.plan),
            "coarsened": field.coarsened,
            "blocks": sol.blocks,
            "training_blocks": field.training_reports,
            "junctions": sol.junctions,
            "apriori": apriori,
            "field_population": "valid for the sampled prefixes only: training paths start at x0 + spread*N(0, I) and follow the forward equation with (y, z) = 0",
        });
        write_manifest(dir, "solve", manifest, vec![f], started)?;
    }
    Ok(0)
}

fn parse_riccati(parts: &[String]) -> Result<(f64, f64), CliError> {
    let (mut a, mut c) = (None, None);
    for part in parts {
        let (key, value) = part.split_once('=').ok_or_else(|| CliError::Usage(format!("expected key=value, got {part:?}")))?;
        let v: f64 = value.parse().map_err(|_| CliError::Usage(format!("not a number: {value:?}")))?;
        match key {
            "a" => a = Some(v),
            "c" => c = Some(v),
            _ => return Err(CliError::Usage(format!("unknown Riccati parameter {key:?}"))),
        }
    }
    match (a, c) {
        (Some(a), Some(c)) => Ok((a, c)),
        _ => Err(CliError::Usage("--riccati needs a=.. and c=..".into())),
    }
}

fn domode_csv(sol: &ODESolution) -> String {
    let mut s = String::from("t,y,k\n");
    for ((t, y), k) in sol.times.iter().zip(&sol.y).zip(&sol.k_schedule) {
        s.push_str(&format!("{},{},{}\n", num(*t), num(*y), num(*k)));
    }
    s
}

fn cmd_domode(a: &DomodeArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let started = Instant::now();
    if !(a.horizon > 0.0 && a.horizon.is_finite()) {
        return Err(CliError::Usage(format!("--T must be positive, got {}", a.horizon)));
    }
    let (label, ode, warnings, solution) = if let Some(parts) = &a.riccati {
        let (qa, c) = parse_riccati(parts)?;
        let ode = DominatingODE::riccati(qa, c, a.horizon);
        let sol = integrate_backward(&ode, Some(a.ode_steps), DEFAULT_BLOWUP_THRESHOLD)?;
        ("riccati".to_string(), ode, Vec::new(), sol)
    } else {
        let base = match &a.problem {
            Some(name) => Some(registry::build(name, &RegistryParams { horizon: a.horizon, x0: None, k: a.k })?),
            None => None,
        };
        let default_l = base.as_ref().map(|p| p.lipschitz);
        let l = match (default_l, a.k0, a.k1, a.grad_z_sigma) {
            (Some(l), None, None, None) => l,
            (l, k0, k1, gz) => LipschitzData::new(
                k0.or(l.map(|l| l.k0)).unwrap_or(1.0),
                k1.or(l.map(|l| l.k1)).unwrap_or(1.0),
                gz.or(l.map(|l| l.grad_z_sigma)).unwrap_or(0.0),
            )?,
        };
        let class = match &a.class {
            Some(c) => ProblemClass::parse(c).ok_or_else(|| CliError::Usage(format!("unknown class {c:?}")))?,
            None => base.as_ref().map(|p| p.declared_class).unwrap_or(ProblemClass::General),
        };
        let (d, n) = base.as_ref().map(|p| (p.d, p.n)).unwrap_or((1, 1));
        let lip = t_max_for_lipschitz(&l, class, d, n, a.horizon, None)?;
        let solution = if a.ode_steps == crate::dominating_ode::DEFAULT_ODE_STEPS {
            lip.solution
        } else {
            integrate_backward(&lip.ode, Some(a.ode_steps), DEFAULT_BLOWUP_THRESHOLD)?
        };
        let label = base.map(|p| p.name).unwrap_or_else(|| "flags".into());
        (label, lip.ode, lip.warnings, solution)
    };
    emit(out, format!("source: {label}"));
    emit(out, format!("kind: {}", serde_json::to_value(ode.kind).expect("serializable").as_str().unwrap_or_default()));
    emit(out, format!("G: {}*y^2 + {}*y + {}", ode.quadratic, ode.linear, ode.constant));
    for w in &warnings {
        emit(out, format!("warning: {w}"));
    }
    match solution.t_max {
        Some(t) => emit(out, format!("t_max: {}", num(t))),
        None => emit(out, "t_max: none".into()),
    }
    if let Some(dir) = &a.out.out {
        let f = write_file(dir, "domode.csv", &domode_csv(&solution))?;
        let manifest = json!({
            "source": label,
            "ode": ode,
            "horizon": a.horizon,
            "ode_steps": a.ode_steps,
            "t_max": solution.t_max,
            "warnings": warnings,
        });
        write_manifest(dir, "domode", manifest, vec![f], started)?;
    }
    Ok(0)
}

fn cmd_stability(a: &StabilityArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let started = Instant::now();
    let base = a.problem.build()?;
    let other = match &a.against {
        Some(name) => ProblemArgs { problem: name.clone(), ..a.problem.clone() }.build()?,
        None => base.clone(),
    };
    let x0 = base.x0.clone();
    let x0_prime = a.x0_prime.map(|v| vec![v; base.d]).unwrap_or_else(|| x0.clone());
    let cfg = a.solver.config();
    let drivers = a.sweep_f.clone().unwrap_or_else(|| vec![a.shift_f]);
    let mut reports: Vec<(f64, StabilityReport)> = Vec::with_capacity(drivers.len());
    for c in drivers {
        let shift = Shift { drift: a.shift_b, diffusion: a.shift_sigma, driver: c, terminal: a.shift_g };
        let perturbed = if shift == Shift::default() { other.clone() } else { shifted(&other, shift)? };
        let r = stability_report(&perturbed, &base, &x0, &x0_prime, a.problem.horizon, &cfg)?;
        emit(
            out,
            format!("shift_f={} lhs={} rhs={} ratio={}", num(c), num(r.lhs), num(r.rhs_driver), opt_num(r.ratio)),
        );
        reports.push((c, r));
    }
    let ratios: Vec<f64> = reports.iter().filter_map(|(_, r)| r.ratio).collect();
    let spread = if ratios.len() > 1 {
        let hi = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        Some(hi / lo)
    } else {
        None
    };
    if let Some(s) = spread {
        emit(out, format!("ratio_spread: {}", num(s)));
    }
    if let Some(dir) = &a.out.out {
        let body = json!({
            "reports": reports.iter().map(|(c, r)| json!({ "shift_f": c, "report": r })).collect::<Vec<_>>(),
            "ratio_spread": spread,
        });
        let f = write_file(dir, "stability.json", &to_sorted_json(&body))?;
        let manifest = json!({
            "problem": base.name,
            "against": other.name,
            "parameters": a.problem.params(),
            "x0_prime": x0_prime,
            "shifts": { "b": a.shift_b, "sigma": a.shift_sigma, "g": a.shift_g, "f": a.sweep_f.clone().unwrap_or_else(|| vec![a.shift_f]) },
            "seeds": { "base": cfg.seed, "paths": cfg.n_paths },
            "grid": { "steps_per_block": cfg.steps_per_interval, "n_blocks": reports.first().map(|(_, r)| r.n_blocks) },
        });
        write_manifest(dir, "stability", manifest, vec![f], started)?;
    }
    Ok(0)
}
