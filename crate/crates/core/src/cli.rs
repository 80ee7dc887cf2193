//! Command-line front end: JSON configuration and CSV/JSON emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::horizon::{self, StepSequence};
use crate::sensitivity::{self, SensitivityError, FD_STEP, ROW_LABELS};
use crate::sequencer::{
    LateralDirection, SequencerParams, StanceContext, TimingAnchor, IDX_BY, IDX_PY,
};
use crate::simulator::{self, Scenario, SimulationOutput};

/// Relative tolerance and absolute floor of the finite-difference check.
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("plan failed at t = {time} s: {message}")]
    Fall { time: f64, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Fall { .. } => 4,
            CliError::Io { .. } => 1,
        }
    }
}

impl From<SensitivityError> for CliError {
    fn from(e: SensitivityError) -> Self {
        CliError::Solver(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dcm-stepper",
    version,
    about = "DCM footstep sequencing and LIPM walking"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for sampling and measurement noise.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a step sequence over a horizon.
    Plan {
        #[command(flatten)]
        common: CommonArgs,
        /// Horizon length (s).
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Sensitivity of the next step to DCM measurement errors.
    Sensitivity {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of perturbed re-solves for the solution surface.
        #[arg(long)]
        samples: Option<usize>,
        /// Compare against central finite differences.
        #[arg(long)]
        fd_check: bool,
    },
    /// Closed-loop walking simulation.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Regenerate the full sequence over this horizon every period (s).
        #[arg(long)]
        horizon: Option<f64>,
        /// JSON object mapping run names to scenarios; one directory per run.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
}

/// Stance snapshot as written in the configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    pub support: [f64; 2],
    pub elapsed: f64,
    pub dcm: [f64; 2],
    pub next_direction: LateralDirection,
    pub anchor: TimingAnchor,
    pub touchdown_time: f64,
}

impl Default for ContextConfig {
    fn default() -> Self {
        let r = StanceContext::reference();
        Self {
            support: r.support.into(),
            elapsed: r.elapsed,
            dcm: r.dcm.into(),
            next_direction: r.next_direction,
            anchor: r.anchor,
            touchdown_time: r.touchdown_time,
        }
    }
}

impl From<ContextConfig> for StanceContext {
    fn from(c: ContextConfig) -> Self {
        StanceContext {
            support: Vector2::from(c.support),
            elapsed: c.elapsed,
            dcm: Vector2::from(c.dcm),
            next_direction: c.next_direction,
            anchor: c.anchor,
            touchdown_time: c.touchdown_time,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfaceConfig {
    pub samples: usize,
    /// Standard deviation of each perturbation component (m).
    pub sigma: f64,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            sigma: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub params: SequencerParams,
    pub context: ContextConfig,
    /// Planning horizon for `plan` (s).
    pub horizon: f64,
    pub surface: SurfaceConfig,
    pub scenario: Scenario,
    pub out: Option<PathBuf>,
    /// Overrides the scenario seed when set.
    pub seed: Option<u64>,
    /// Significant digits in CSV output.
    pub precision: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            params: SequencerParams::default(),
            context: ContextConfig::default(),
            horizon: 3.0,
            surface: SurfaceConfig::default(),
            scenario: Scenario::default(),
            out: None,
            seed: None,
            precision: 17,
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn resolve(common: &CommonArgs) -> Result<Self, CliError> {
        let mut cfg = match &common.config {
            Some(path) => Self::load(path)?,
            None => Self::default(),
        };
        if common.out.is_some() {
            cfg.out = common.out.clone();
        }
        if common.seed.is_some() {
            cfg.seed = common.seed;
        }
        if let Some(seed) = cfg.seed {
            cfg.scenario.seed = seed;
        }
        if !(1..=17).contains(&cfg.precision) {
            return Err(CliError::Config(format!(
                "precision {} outside 1..=17",
                cfg.precision
            )));
        }
        cfg.params
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

/// Scientific notation with `digits` significant digits.
pub fn fmt_float(v: f64, digits: usize) -> String {
    format!("{:.*e}", digits.saturating_sub(1), v)
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| CliError::Io { path, source })
}

fn csv_line(out: &mut String, fields: &[String]) {
    out.push_str(&fields.join(","));
    out.push('\n');
}

pub fn steps_csv(seq: &StepSequence, digits: usize) -> String {
    let f = |v: f64| fmt_float(v, digits);
    let mut out = String::from("k,side,p_x,p_y,T,contact_time,gamma,b_x,b_y\n");
    for (k, s) in seq.steps.iter().enumerate() {
        csv_line(
            &mut out,
            &[
                k.to_string(),
                s.side.label().to_string(),
                f(s.position.x),
                f(s.position.y),
                f(s.duration),
                f(s.contact_time),
                f(s.gamma),
                f(s.dcm_offset.x),
                f(s.dcm_offset.y),
            ],
        );
    }
    out
}

pub fn dcm_chain_csv(seq: &StepSequence, digits: usize) -> String {
    let f = |v: f64| fmt_float(v, digits);
    let mut out = String::from("k,contact_time,zeta_x,zeta_y\n");
    for (k, (s, z)) in seq.steps.iter().zip(&seq.zeta_chain).enumerate() {
        csv_line(
            &mut out,
            &[k.to_string(), f(s.contact_time), f(z.x), f(z.y)],
        );
    }
    out
}

pub fn trace_csv(sim: &SimulationOutput, digits: usize) -> String {
    let f = |v: f64| fmt_float(v, digits);
    let mut out = String::from(
        "t,c_x,c_y,cdot_x,cdot_y,zeta_x,zeta_y,zeta_hat_x,zeta_hat_y,p0_x,p0_y,support_side,\
         swing_z,next_p_x,next_p_y,next_T,next_contact_time,next_b_x,next_b_y\n",
    );
    for r in &sim.trace {
        csv_line(
            &mut out,
            &[
                f(r.time),
                f(r.com.x),
                f(r.com.y),
                f(r.com_vel.x),
                f(r.com_vel.y),
                f(r.dcm.x),
                f(r.dcm.y),
                f(r.dcm_measured.x),
                f(r.dcm_measured.y),
                f(r.support.x),
                f(r.support.y),
                r.support_side.label().to_string(),
                f(r.swing_height),
                f(r.next_step.position.x),
                f(r.next_step.position.y),
                f(r.next_step.duration),
                f(r.next_step.contact_time),
                f(r.next_step.dcm_offset.x),
                f(r.next_step.dcm_offset.y),
            ],
        );
    }
    out
}

/// Execute a parsed command line; returns the text printed to stdout.
pub fn execute(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Plan { common, horizon } => {
            let mut cfg = Config::resolve(common)?;
            if let Some(h) = horizon {
                cfg.horizon = *h;
            }
            cmd_plan(&cfg)
        }
        Command::Sensitivity {
            common,
            samples,
            fd_check,
        } => {
            let mut cfg = Config::resolve(common)?;
            if let Some(n) = samples {
                cfg.surface.samples = *n;
            }
            cmd_sensitivity(&cfg, *fd_check)
        }
        Command::Simulate {
            common,
            horizon,
            sweep,
        } => {
            let mut cfg = Config::resolve(common)?;
            if horizon.is_some() {
                cfg.scenario.plan_horizon = *horizon;
            }
            match sweep {
                Some(path) => cmd_sweep(&cfg, path),
                None => cmd_simulate(&cfg),
            }
        }
    }
}

pub fn cmd_plan(cfg: &Config) -> Result<String, CliError> {
    if !(cfg.horizon >= 0.0) {
        return Err(CliError::Config(format!("invalid horizon {}", cfg.horizon)));
    }
    let ctx = StanceContext::from(cfg.context);
    let seq = horizon::generate_sequence(&cfg.params, &ctx, cfg.horizon)
        .map_err(|e| CliError::Solver(e.to_string()))?;
    let dir = cfg.out_dir();
    write_file(&dir, "steps.csv", &steps_csv(&seq, cfg.precision))?;
    write_file(&dir, "dcm_chain.csv", &dcm_chain_csv(&seq, cfg.precision))?;
    let mut msg = format!("steps: {}\n", seq.steps.len());
    match seq.mean_velocity() {
        Some(v) => writeln!(
            msg,
            "mean velocity: {v:.6} m/s (nominal {:.6})",
            cfg.params.nominal_velocity()
        ),
        None => writeln!(msg, "mean velocity: undefined (single step)"),
    }
    .expect("write to string");
    Ok(msg)
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub fn cmd_sensitivity(cfg: &Config, fd_check: bool) -> Result<String, CliError> {
    if !(cfg.surface.sigma >= 0.0 && cfg.surface.sigma.is_finite()) {
        return Err(CliError::Config(
            "surface sigma must be finite and nonnegative".into(),
        ));
    }
    let ctx = StanceContext::from(cfg.context);
    let res = sensitivity::dcm_sensitivity(&cfg.params, &ctx)?;
    let mut msg = String::new();
    let dp = res.primal(IDX_PY, 1);
    let db = res.primal(IDX_BY, 1);
    writeln!(msg, "dp_Ty/dtheta_y = {dp:.6}").unwrap();
    writeln!(msg, "db_Ty/dtheta_y = {db:.6e}").unwrap();
    writeln!(
        msg,
        "KKT condition number = {:.3e}",
        res.kkt_condition_number
    )
    .unwrap();

    let mut fd_deviation = None;
    if fd_check {
        let fd = sensitivity::finite_difference_primal(&cfg.params, &ctx, FD_STEP)?;
        let dev = sensitivity::max_relative_deviation(&res.d_primal, &fd, FD_REL_TOL, FD_ABS_FLOOR);
        writeln!(msg, "max relative deviation analytic vs FD = {dev:.3e}").unwrap();
        fd_deviation = Some(dev);
    }

    let doc = json!({
        "row_labels": ROW_LABELS,
        "d_full": matrix_rows(&res.d_full),
        "d_primal": matrix_rows(&res.d_primal),
        "kkt_condition_number": res.kkt_condition_number,
        "dp_Ty_dtheta_y": dp,
        "db_Ty_dtheta_y": db,
        "x": res.point.x.iter().copied().collect::<Vec<_>>(),
        "u": res.point.u.iter().copied().collect::<Vec<_>>(),
        "w": res.point.w.iter().copied().collect::<Vec<_>>(),
        "active_set": res.point.active_set,
        "fd_max_relative_deviation": fd_deviation,
    });
    let dir = cfg.out_dir();
    write_file(&dir, "sensitivity.json", &to_json(&doc))?;

    let thetas = sensitivity::sample_thetas(
        cfg.surface.samples,
        cfg.surface.sigma,
        cfg.seed.unwrap_or(0),
    );
    let rows = sensitivity::solution_surface(&cfg.params, &ctx, &thetas)?;
    let f = |v: f64| fmt_float(v, cfg.precision);
    let mut csv =
        String::from("theta_x,theta_y,p_x,p_y,gamma,b_x,b_y,active_set,active_set_changed\n");
    for r in &rows {
        let mut fields = vec![f(r.theta.x), f(r.theta.y)];
        match &r.solution {
            Some(x) => fields.extend(x.iter().map(|&v| f(v))),
            None => fields.extend(std::iter::repeat_n("NaN".to_string(), 5)),
        }
        let set: Vec<String> = r.active_set.iter().map(|i| i.to_string()).collect();
        fields.push(set.join(";"));
        fields.push(r.active_set_changed.to_string());
        csv_line(&mut csv, &fields);
    }
    write_file(&dir, "surface.csv", &csv)?;
    if !rows.is_empty() {
        let changed = rows.iter().filter(|r| r.active_set_changed).count();
        writeln!(
            msg,
            "surface samples: {} (active set changed in {changed})",
            rows.len()
        )
        .unwrap();
        if let Some(fit) = sensitivity::fit_plane(&rows, IDX_PY) {
            writeln!(msg, "plane slope dp_Ty/dtheta_y = {:.6}", fit.slope.y).unwrap();
        }
    }
    Ok(msg)
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn write_simulation(dir: &Path, sim: &SimulationOutput, digits: usize) -> Result<(), CliError> {
    write_file(dir, "trace.csv", &trace_csv(sim, digits))?;
    write_file(dir, "steps.csv", &steps_csv(&sim.steps_taken, digits))?;
    write_file(dir, "metrics.json", &to_json(&sim.metrics))
}

fn simulate_into(
    params: &SequencerParams,
    scenario: &Scenario,
    dir: &Path,
    digits: usize,
) -> Result<String, CliError> {
    let sim = simulator::run(params, scenario).map_err(|e| CliError::Config(e.to_string()))?;
    write_simulation(dir, &sim, digits)?;
    if let Some(f) = &sim.failure {
        return Err(CliError::Fall {
            time: f.time,
            message: f.message.clone(),
        });
    }
    let m = &sim.metrics;
    Ok(format!(
        "steps taken: {}\nmean velocity: ({:.6}, {:.6}) m/s\ntracking error: ({:.3e}, {:.3e}) m/s\n",
        m.steps_taken, m.mean_velocity[0], m.mean_velocity[1], m.tracking_error[0], m.tracking_error[1]
    ))
}

pub fn cmd_simulate(cfg: &Config) -> Result<String, CliError> {
    simulate_into(&cfg.params, &cfg.scenario, &cfg.out_dir(), cfg.precision)
}

/// Run every scenario of a sweep file concurrently. The reported error is
/// the one of the first failing run in name order.
pub fn cmd_sweep(cfg: &Config, path: &Path) -> Result<String, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let runs: BTreeMap<String, Scenario> = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for name in runs.keys() {
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(CliError::Config(format!("invalid run name {name:?}")));
        }
    }
    let base = cfg.out_dir();
    let results: Vec<(String, Result<String, CliError>)> = runs
        .par_iter()
        .map(|(name, scenario)| {
            let mut scenario = scenario.clone();
            if let Some(seed) = cfg.seed {
                scenario.seed = seed;
            }
            if cfg.scenario.plan_horizon.is_some() {
                scenario.plan_horizon = cfg.scenario.plan_horizon;
            }
            let r = simulate_into(&cfg.params, &scenario, &base.join(name), cfg.precision);
            (name.clone(), r)
        })
        .collect();
    let mut msg = String::new();
    let mut first_err = None;
    for (name, r) in results {
        match r {
            Ok(text) => {
                writeln!(msg, "[{name}]").unwrap();
                msg.push_str(&text);
            }
            Err(e) => {
                writeln!(msg, "[{name}] {e}").unwrap();
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => {
            eprint!("{msg}");
            Err(e)
        }
        None => Ok(msg),
    }
}
