//! Closed-loop walking simulation on the linear inverted pendulum.
//!
//! The CoM `c` and DCM `zeta` obey `c' = w0 (zeta - c)` and
//! `zeta' = w0 (zeta - p0)` with the support point `p0` fixed between
//! touchdowns. Both are integrated in closed form. Every control period the
//! next step is replanned from the (optionally noisy) measured DCM; the
//! swing foot lands exactly at the planned contact time, splitting the
//! control period when needed.

use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::horizon::{self, StepSequence};
use crate::sequencer::{
    nominal_dcm_offset, Bounds, LateralDirection, SequencerParams, StanceContext, Step,
    TimingAnchor,
};

/// Half-width of the lateral band around the nominal width used to decide
/// that a push has been recovered (m).
pub const RECOVERY_BAND: f64 = 0.02;
/// Relative band around the commanded velocity used for the rise time.
pub const VELOCITY_BAND: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// Pendulum state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipmState {
    pub com: Vector2<f64>,
    pub com_vel: Vector2<f64>,
    pub dcm: Vector2<f64>,
    pub support: Vector2<f64>,
    /// Absolute time (s).
    pub time: f64,
    /// Time of the last touchdown (s).
    pub touchdown_time: f64,
    /// Lateral direction of the step that placed the support foot.
    pub support_side: LateralDirection,
    pub omega0: f64,
}

impl LipmState {
    /// State with the CoM velocity implied by the DCM identity.
    pub fn new(
        com: Vector2<f64>,
        dcm: Vector2<f64>,
        support: Vector2<f64>,
        support_side: LateralDirection,
        omega0: f64,
    ) -> Self {
        Self {
            com,
            com_vel: (dcm - com) * omega0,
            dcm,
            support,
            time: 0.0,
            touchdown_time: 0.0,
            support_side,
            omega0,
        }
    }

    /// Touchdown state of the periodic nominal gait at `t = 0`.
    ///
    /// The DCM offset is the nominal one and the CoM sits on the periodic
    /// orbit of the CoM dynamics driven by the nominal gait.
    pub fn nominal(
        params: &SequencerParams,
        support: Vector2<f64>,
        support_side: LateralDirection,
    ) -> Self {
        let w0 = params.omega0();
        let period = params.duration.nom;
        let decay = (-w0 * period).exp();
        let sh = (w0 * period).sinh();
        let this = support_side;
        let next = support_side.flip();
        let b_this = nominal_dcm_offset(params, this);
        let b_next = nominal_dcm_offset(params, next);
        let w_this = params.width(this).nom;
        let w_next = params.width(next).nom;

        let gamma_x = (b_this.x * sh - params.length.nom) / (1.0 - decay);
        let gamma_y = (b_this.y * sh * decay - w_next * decay + b_next.y * sh - w_this)
            / (1.0 - decay * decay);
        Self::new(
            support + Vector2::new(gamma_x, gamma_y),
            support + b_this,
            support,
            support_side,
            w0,
        )
    }

    /// Exact propagation over `dt` with the support held fixed.
    pub fn propagate(&self, dt: f64) -> Self {
        let w = self.omega0 * dt;
        let p = self.support;
        let dcm = p + (self.dcm - p) * w.exp();
        let com = p + (self.com - p) * (-w).exp() + (self.dcm - p) * w.sinh();
        Self {
            com,
            com_vel: (dcm - com) * self.omega0,
            dcm,
            time: self.time + dt,
            ..*self
        }
    }

    /// Instantaneous impulse (N s) applied to a point mass (kg).
    pub fn apply_push(&self, impulse: Vector2<f64>, mass: f64) -> Self {
        assert!(mass > 0.0, "mass must be positive");
        self.apply_dcm_push(impulse / (mass * self.omega0))
    }

    /// Instantaneous DCM displacement; the CoM position is unchanged.
    pub fn apply_dcm_push(&self, delta: Vector2<f64>) -> Self {
        Self {
            com_vel: self.com_vel + delta * self.omega0,
            dcm: self.dcm + delta,
            ..*self
        }
    }

    /// Switch support to a landed step, displaced by `slip`.
    pub fn touchdown(&self, step: &Step, slip: Vector2<f64>) -> Self {
        Self {
            support: step.position + slip,
            support_side: step.side,
            touchdown_time: self.time,
            ..*self
        }
    }

    /// `|zeta - (c + c'/w0)|_inf`.
    pub fn dcm_identity_error(&self) -> f64 {
        (self.dcm - self.com - self.com_vel / self.omega0).amax()
    }
}

/// Nominal step geometry in force from `start` onward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandPhase {
    pub start: f64,
    /// Nominal step length (m).
    pub step_length: f64,
    /// Nominal step duration (s); keeps the parameter value when absent.
    #[serde(default)]
    pub step_duration: Option<f64>,
    /// Nominal lateral width magnitude (m); keeps the parameter values when absent.
    #[serde(default)]
    pub step_width: Option<f64>,
}

/// A push, given either as an impulse (needs `mass`) or as a DCM jump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Push {
    pub time: f64,
    /// Impulse (N s).
    #[serde(default)]
    pub impulse: Option<[f64; 2]>,
    /// DCM displacement (m).
    #[serde(default)]
    pub dcm: Option<[f64; 2]>,
}

/// Landing displacement applied to one step (0-based index of steps taken).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Slip {
    pub step: usize,
    pub displacement: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    /// Simulated time (s).
    pub duration: f64,
    /// Replanning period (s).
    pub control_dt: f64,
    pub commands: Vec<CommandPhase>,
    pub pushes: Vec<Push>,
    pub slips: Vec<Slip>,
    /// Standard deviation of the DCM measurement noise (m).
    pub noise_sigma: f64,
    pub seed: u64,
    /// Robot mass (kg), only needed for impulse pushes.
    pub mass: Option<f64>,
    /// Regenerate the full sequence over this horizon each period instead
    /// of only the next step (s).
    pub plan_horizon: Option<f64>,
    pub anchor: TimingAnchor,
    /// Apex of the swing-foot height reference (m).
    pub swing_height: f64,
    /// Window used for the mean velocity; defaults to the second half.
    pub steady_window: Option<[f64; 2]>,
    pub initial_support: [f64; 2],
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            duration: 10.0,
            control_dt: 0.01,
            commands: Vec::new(),
            pushes: Vec::new(),
            slips: Vec::new(),
            noise_sigma: 0.0,
            seed: 0,
            mass: None,
            plan_horizon: None,
            anchor: TimingAnchor::Touchdown,
            swing_height: 0.05,
            steady_window: None,
            initial_support: [0.0, 0.0],
        }
    }
}

impl Scenario {
    pub fn validate(&self, params: &SequencerParams) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration {} must be positive", self.duration));
        }
        if !(self.control_dt > 0.0) {
            return bad(format!("control_dt {} must be positive", self.control_dt));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and nonnegative".into());
        }
        let in_range = |t: f64| (0.0..=self.duration).contains(&t);
        for c in &self.commands {
            if !in_range(c.start) {
                return bad(format!("command start {} outside the run", c.start));
            }
            params_for(params, Some(c))
                .validate()
                .map_err(|e| ScenarioError::Invalid(format!("command at {}: {e}", c.start)))?;
        }
        for p in &self.pushes {
            if !in_range(p.time) {
                return bad(format!("push time {} outside the run", p.time));
            }
            match (p.impulse, p.dcm) {
                (Some(_), None) => {
                    if !self.mass.is_some_and(|m| m > 0.0) {
                        return bad("impulse pushes need a positive mass".into());
                    }
                }
                (None, Some(_)) => {}
                _ => {
                    return bad(format!(
                        "push at {} needs exactly one of impulse/dcm",
                        p.time
                    ))
                }
            }
        }
        if let Some(h) = self.plan_horizon {
            if !(h >= 0.0) {
                return bad("plan_horizon must be nonnegative".into());
            }
        }
        if let Some([a, b]) = self.steady_window {
            if !(a < b) {
                return bad("steady_window must be increasing".into());
            }
        }
        Ok(())
    }

    /// Command phase active at `t`.
    pub fn command_at(&self, t: f64) -> Option<&CommandPhase> {
        self.commands
            .iter()
            .filter(|c| c.start <= t)
            .max_by(|a, b| a.start.total_cmp(&b.start))
    }
}

fn params_for(base: &SequencerParams, command: Option<&CommandPhase>) -> SequencerParams {
    let mut p = *base;
    if let Some(c) = command {
        p.length = Bounds {
            nom: c.step_length,
            ..p.length
        };
        if let Some(d) = c.step_duration {
            p.duration = Bounds {
                nom: d,
                ..p.duration
            };
        }
        if let Some(w) = c.step_width {
            p.width_negative = Bounds {
                nom: -w.abs(),
                ..p.width_negative
            };
            p.width_positive = Bounds {
                nom: w.abs(),
                ..p.width_positive
            };
        }
    }
    p
}

/// One sample of the closed loop, taken at the start of a control period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub time: f64,
    pub com: Vector2<f64>,
    pub com_vel: Vector2<f64>,
    pub dcm: Vector2<f64>,
    pub dcm_measured: Vector2<f64>,
    pub support: Vector2<f64>,
    pub support_side: LateralDirection,
    /// Swing-foot height reference (m).
    pub swing_height: f64,
    pub next_step: Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean CoM velocity over the steady window (m/s).
    pub mean_velocity: [f64; 2],
    pub target_velocity: [f64; 2],
    /// `|mean - target|` per axis (m/s).
    pub tracking_error: [f64; 2],
    pub steady_window: [f64; 2],
    pub steps_taken: usize,
    /// Steps after the first push up to the last one whose width left the
    /// nominal band.
    pub recovery_steps: Option<usize>,
    /// Time from the last command change until the step velocity settles
    /// within the band around the new target (s).
    pub rise_time: Option<f64>,
    pub plan_failed_at: Option<f64>,
    pub max_dcm_identity_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanFailure {
    pub time: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput {
    pub trace: Vec<TraceRow>,
    /// Steps as executed: landing includes slip, offsets and times are the
    /// ones realized at touchdown.
    pub steps_taken: StepSequence,
    /// CoM at each touchdown, aligned with `steps_taken.steps`.
    pub touchdown_com: Vec<Vector2<f64>>,
    pub metrics: Metrics,
    pub failure: Option<PlanFailure>,
}

enum Event {
    Push(Vector2<f64>),
    Touchdown(Step),
}

/// Run a scenario from the nominal touchdown state.
pub fn run(
    params: &SequencerParams,
    scenario: &Scenario,
) -> Result<SimulationOutput, ScenarioError> {
    params
        .validate()
        .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    scenario.validate(params)?;

    let initial_params = params_for(params, scenario.command_at(0.0));
    let support = Vector2::from(scenario.initial_support);
    let mut state = LipmState::nominal(&initial_params, support, LateralDirection::Positive);

    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let noise = (scenario.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, scenario.noise_sigma).expect("validated sigma"));

    let mut pushes: Vec<(f64, Vector2<f64>)> = scenario
        .pushes
        .iter()
        .map(|p| {
            let delta = match (p.impulse, p.dcm) {
                (Some(j), _) => Vector2::from(j) / (scenario.mass.unwrap_or(1.0) * state.omega0),
                (_, Some(d)) => Vector2::from(d),
                _ => unreachable!("validated"),
            };
            (p.time, delta)
        })
        .collect();
    pushes.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut push_cursor = 0;

    let ticks = (scenario.duration / scenario.control_dt).round() as usize;
    let mut trace = Vec::with_capacity(ticks);
    let mut taken: Vec<Step> = Vec::new();
    let mut touchdown_com = Vec::new();
    let mut failure = None;
    let mut max_identity: f64 = 0.0;

    for k in 0..ticks {
        let t = k as f64 * scenario.control_dt;
        let t_next = (k + 1) as f64 * scenario.control_dt;
        state.time = t;

        let mut measured = state.dcm;
        if let Some(n) = &noise {
            measured += Vector2::new(n.sample(&mut rng), n.sample(&mut rng));
        }

        let step_params = params_for(params, scenario.command_at(t));
        let ctx = StanceContext {
            support: state.support,
            elapsed: (t - state.touchdown_time).max(0.0),
            dcm: measured,
            next_direction: state.support_side.flip(),
            anchor: scenario.anchor,
            touchdown_time: state.touchdown_time,
        };
        let plan = match horizon::generate_sequence(
            &step_params,
            &ctx,
            scenario.plan_horizon.unwrap_or(0.0),
        ) {
            Ok(plan) => plan,
            Err(e) => {
                failure = Some(PlanFailure {
                    time: t,
                    message: e.to_string(),
                });
                break;
            }
        };
        let next = plan.steps[0];
        let swing = horizon::swing_height_reference(
            ctx.elapsed.min(next.duration),
            next.duration,
            scenario.swing_height,
        )
        .unwrap_or(0.0);
        max_identity = max_identity.max(state.dcm_identity_error());
        trace.push(TraceRow {
            time: t,
            com: state.com,
            com_vel: state.com_vel,
            dcm: state.dcm,
            dcm_measured: measured,
            support: state.support,
            support_side: state.support_side,
            swing_height: swing,
            next_step: next,
        });

        // events inside [t, t_next), in time order; pushes first on ties
        let mut events: Vec<(f64, Event)> = Vec::new();
        while push_cursor < pushes.len() && pushes[push_cursor].0 < t_next {
            let (time, delta) = pushes[push_cursor];
            events.push((time.max(t), Event::Push(delta)));
            push_cursor += 1;
        }
        if next.contact_time < t_next {
            events.push((next.contact_time.max(t), Event::Touchdown(next)));
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0));

        for (time, event) in events {
            state = state.propagate(time - state.time);
            state.time = time;
            match event {
                Event::Push(delta) => state = state.apply_dcm_push(delta),
                Event::Touchdown(step) => {
                    let slip = scenario
                        .slips
                        .iter()
                        .filter(|s| s.step == taken.len())
                        .fold(Vector2::zeros(), |acc, s| {
                            acc + Vector2::from(s.displacement)
                        });
                    let previous_touchdown = state.touchdown_time;
                    state = state.touchdown(&step, slip);
                    let duration = time - previous_touchdown;
                    taken.push(Step {
                        position: state.support,
                        gamma: (state.omega0 * duration).exp(),
                        duration,
                        contact_time: time,
                        dcm_offset: state.dcm - state.support,
                        side: step.side,
                    });
                    touchdown_com.push(state.com);
                }
            }
        }
        state = state.propagate(t_next - state.time);
    }

    let zeta_chain = taken.iter().map(|s| s.dcm_at_contact()).collect();
    let steps_taken = StepSequence {
        steps: taken,
        t0: 0.0,
        horizon: scenario.duration,
        zeta_chain,
    };
    let metrics = compute_metrics(
        params,
        scenario,
        &trace,
        &steps_taken,
        &touchdown_com,
        failure.as_ref().map(|f| f.time),
        max_identity,
    );
    Ok(SimulationOutput {
        trace,
        steps_taken,
        touchdown_com,
        metrics,
        failure,
    })
}

fn compute_metrics(
    params: &SequencerParams,
    scenario: &Scenario,
    trace: &[TraceRow],
    taken: &StepSequence,
    touchdown_com: &[Vector2<f64>],
    plan_failed_at: Option<f64>,
    max_dcm_identity_error: f64,
) -> Metrics {
    let window = scenario
        .steady_window
        .unwrap_or([scenario.duration / 2.0, scenario.duration]);
    let target_params = params_for(params, scenario.command_at(window[1]));
    let target = [target_params.nominal_velocity(), 0.0];
    let mean = mean_velocity(trace, taken, touchdown_com, window);
    Metrics {
        mean_velocity: mean,
        target_velocity: target,
        tracking_error: [(mean[0] - target[0]).abs(), (mean[1] - target[1]).abs()],
        steady_window: window,
        steps_taken: taken.steps.len(),
        recovery_steps: recovery_steps(params, scenario, taken),
        rise_time: rise_time(params, scenario, taken),
        plan_failed_at,
        max_dcm_identity_error,
    }
}

/// Mean CoM velocity over whole gait cycles inside the window; falls back
/// to the CoM displacement across the window when fewer than two cycles
/// are available.
fn mean_velocity(
    trace: &[TraceRow],
    taken: &StepSequence,
    touchdown_com: &[Vector2<f64>],
    window: [f64; 2],
) -> [f64; 2] {
    let inside: Vec<usize> = taken
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| s.contact_time >= window[0] && s.contact_time <= window[1])
        .map(|(i, _)| i)
        .collect();
    if inside.len() >= 3 {
        let first = inside[0];
        let mut last = *inside.last().unwrap();
        if (last - first) % 2 == 1 {
            last -= 1;
        }
        let dt = taken.steps[last].contact_time - taken.steps[first].contact_time;
        let v = (touchdown_com[last] - touchdown_com[first]) / dt;
        return [v.x, v.y];
    }
    let rows: Vec<&TraceRow> = trace
        .iter()
        .filter(|r| r.time >= window[0] && r.time <= window[1])
        .collect();
    match (rows.first(), rows.last()) {
        (Some(a), Some(b)) if b.time > a.time => {
            let v = (b.com - a.com) / (b.time - a.time);
            [v.x, v.y]
        }
        _ => [f64::NAN, f64::NAN],
    }
}

fn recovery_steps(
    params: &SequencerParams,
    scenario: &Scenario,
    taken: &StepSequence,
) -> Option<usize> {
    let push_time = scenario.pushes.iter().map(|p| p.time).reduce(f64::min)?;
    let steps = &taken.steps;
    let first_after = steps.iter().position(|s| s.contact_time > push_time)?;
    let mut last_outside = None;
    for k in first_after.max(1)..steps.len() {
        let width = steps[k].position.y - steps[k - 1].position.y;
        let p = params_for(params, scenario.command_at(steps[k].contact_time));
        let nominal = p.width(steps[k].side).nom;
        if (width - nominal).abs() > RECOVERY_BAND {
            last_outside = Some(k);
        }
    }
    Some(last_outside.map_or(0, |k| k - first_after + 1))
}

/// Forward velocity over each full gait cycle, `(t, v)` at the cycle's end.
pub fn cycle_velocities(taken: &StepSequence) -> Vec<(f64, f64)> {
    taken
        .steps
        .windows(3)
        .map(|w| {
            let dt = w[2].contact_time - w[0].contact_time;
            (w[2].contact_time, (w[2].position.x - w[0].position.x) / dt)
        })
        .collect()
}

fn rise_time(params: &SequencerParams, scenario: &Scenario, taken: &StepSequence) -> Option<f64> {
    let switch = scenario
        .commands
        .iter()
        .filter(|c| c.start > 0.0)
        .max_by(|a, b| a.start.total_cmp(&b.start))?;
    let target = params_for(params, Some(switch)).nominal_velocity();
    let band = VELOCITY_BAND * target.abs().max(1e-9);
    let cycles: Vec<(f64, f64)> = cycle_velocities(taken)
        .into_iter()
        .filter(|(t, _)| *t > switch.start)
        .collect();
    let settled_from = cycles
        .iter()
        .rposition(|(_, v)| (v - target).abs() > band)
        .map_or(0, |i| i + 1);
    cycles.get(settled_from).map(|(t, _)| t - switch.start)
}
