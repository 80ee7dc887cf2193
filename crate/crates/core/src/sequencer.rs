//! Single-step footstep QP.
//!
//! The decision vector is `x = (p_x, p_y, gamma, b_x, b_y)` where `p` is the
//! next landing position, `gamma = exp(omega0 * T)` encodes the contact time
//! and `b` is the DCM offset at that contact. Using `gamma` instead of `T`
//! keeps every constraint linear.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qp::{self, QpError, QpProblem, QpSolution};

/// Number of QP decision variables.
pub const NUM_VARS: usize = 5;
/// Number of inequality constraints (length, width and timing bounds).
pub const NUM_INEQ: usize = 6;
/// Number of equality constraints (one DCM dynamics row per axis).
pub const NUM_EQ: usize = 2;

pub const IDX_PX: usize = 0;
pub const IDX_PY: usize = 1;
pub const IDX_GAMMA: usize = 2;
pub const IDX_BX: usize = 3;
pub const IDX_BY: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SequencerError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid stance context: {0}")]
    InvalidContext(String),
    #[error(
        "timing window is empty: gamma lower bound {lower:.6e} exceeds upper bound {upper:.6e}"
    )]
    InvalidBounds { lower: f64, upper: f64 },
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Lateral direction of a step, which selects the width bound set.
///
/// `Negative` is the bound set with negative widths, `Positive` the mirrored
/// one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LateralDirection {
    Negative,
    Positive,
}

impl LateralDirection {
    pub fn flip(self) -> Self {
        match self {
            LateralDirection::Negative => LateralDirection::Positive,
            LateralDirection::Positive => LateralDirection::Negative,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LateralDirection::Negative => "-y",
            LateralDirection::Positive => "+y",
        }
    }
}

/// Lower, nominal and upper value of one step quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min: f64,
    pub nom: f64,
    pub max: f64,
}

impl Bounds {
    pub const fn new(min: f64, nom: f64, max: f64) -> Self {
        Self { min, nom, max }
    }

    fn is_ordered(&self) -> bool {
        self.min <= self.nom && self.nom <= self.max
    }
}

/// Weights, step geometry/timing bounds and pendulum constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequencerParams {
    /// Weight on landing-position tracking.
    pub alpha1: f64,
    /// Weight on contact-timing tracking.
    pub alpha2: f64,
    /// Weight on DCM-offset tracking.
    pub alpha3: f64,
    /// CoM height (m).
    pub com_height: f64,
    /// Gravitational acceleration (m/s^2).
    pub gravity: f64,
    /// Sagittal step length (m).
    pub length: Bounds,
    /// Signed lateral step width when stepping toward -y (m).
    pub width_negative: Bounds,
    /// Signed lateral step width when stepping toward +y (m).
    pub width_positive: Bounds,
    /// Step duration (s).
    pub duration: Bounds,
}

impl Default for SequencerParams {
    /// Default walking parameters.
    fn default() -> Self {
        Self {
            alpha1: 1e3,
            alpha2: 1.0,
            alpha3: 1e6,
            com_height: 0.31,
            gravity: 9.81,
            length: Bounds::new(-0.3, 0.1, 0.3),
            width_negative: Bounds::new(-0.40, -0.25, -0.10),
            width_positive: Bounds::new(0.10, 0.25, 0.40),
            duration: Bounds::new(0.1, 0.3, 1.0),
        }
    }
}

impl SequencerParams {
    /// Natural frequency of the pendulum, `sqrt(g / z_c)`.
    pub fn omega0(&self) -> f64 {
        (self.gravity / self.com_height).sqrt()
    }

    /// `exp(omega0 * t)`.
    pub fn gamma(&self, t: f64) -> f64 {
        (self.omega0() * t).exp()
    }

    pub fn width(&self, direction: LateralDirection) -> &Bounds {
        match direction {
            LateralDirection::Negative => &self.width_negative,
            LateralDirection::Positive => &self.width_positive,
        }
    }

    /// Commanded forward velocity `l_nom / T_nom`.
    pub fn nominal_velocity(&self) -> f64 {
        self.length.nom / self.duration.nom
    }

    pub fn validate(&self) -> Result<(), SequencerError> {
        let bad = |m: &str| Err(SequencerError::InvalidParams(m.to_string()));
        if !(self.alpha1 > 0.0 && self.alpha2 > 0.0 && self.alpha3 > 0.0) {
            return bad("weights must be positive");
        }
        if !(self.com_height > 0.0 && self.gravity > 0.0) {
            return bad("com_height and gravity must be positive");
        }
        if !self.length.is_ordered() {
            return bad("step length bounds must satisfy min <= nom <= max");
        }
        if !self.width_negative.is_ordered() || !self.width_positive.is_ordered() {
            return bad("step width bounds must satisfy min <= nom <= max");
        }
        if !self.duration.is_ordered() || self.duration.min < 0.0 || self.duration.nom <= 0.0 {
            return bad("step duration bounds must satisfy 0 <= min <= nom <= max, nom > 0");
        }
        Ok(())
    }
}

/// Clock point from which the timing bounds and nominal duration are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimingAnchor {
    /// Durations count from the last touchdown of the support foot.
    #[default]
    Touchdown,
    /// Durations count from the replanning instant (`t` of the context).
    Replan,
}

/// Measured state of the current stance used to plan the next step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StanceContext {
    /// Support-foot position `p0` (m).
    pub support: Vector2<f64>,
    /// Time elapsed since the support foot touched down (s).
    pub elapsed: f64,
    /// Measured DCM (m).
    pub dcm: Vector2<f64>,
    /// Lateral bound set applying to the upcoming step.
    pub next_direction: LateralDirection,
    pub anchor: TimingAnchor,
    /// Absolute time of the support foot's touchdown (s).
    pub touchdown_time: f64,
}

impl StanceContext {
    pub fn new(
        support: Vector2<f64>,
        elapsed: f64,
        dcm: Vector2<f64>,
        next_direction: LateralDirection,
    ) -> Self {
        Self {
            support,
            elapsed,
            dcm,
            next_direction,
            anchor: TimingAnchor::Touchdown,
            touchdown_time: 0.0,
        }
    }

    /// The reference snapshot: `p0 = (-0.12, 0.10)`, `t = 0.229`,
    /// measured DCM `(-0.12, -0.07)`, next step toward -y.
    pub fn reference() -> Self {
        Self::new(
            Vector2::new(-0.12, 0.10),
            0.229,
            Vector2::new(-0.12, -0.07),
            LateralDirection::Negative,
        )
    }

    pub fn with_anchor(mut self, anchor: TimingAnchor) -> Self {
        self.anchor = anchor;
        self
    }

    pub fn with_touchdown_time(mut self, touchdown_time: f64) -> Self {
        self.touchdown_time = touchdown_time;
        self
    }

    /// Absolute time at which this context was measured.
    pub fn now(&self) -> f64 {
        self.touchdown_time + self.elapsed
    }

    fn window_origin(&self) -> f64 {
        match self.anchor {
            TimingAnchor::Touchdown => 0.0,
            TimingAnchor::Replan => self.elapsed,
        }
    }

    pub fn validate(&self) -> Result<(), SequencerError> {
        if !(self.elapsed >= 0.0) {
            return Err(SequencerError::InvalidContext(
                "elapsed time since touchdown must be nonnegative".into(),
            ));
        }
        if !self
            .support
            .iter()
            .chain(self.dcm.iter())
            .all(|v| v.is_finite())
            || !self.touchdown_time.is_finite()
        {
            return Err(SequencerError::InvalidContext("non-finite input".into()));
        }
        Ok(())
    }
}

/// One planned footstep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    /// Landing position (m).
    pub position: Vector2<f64>,
    /// `exp(omega0 * duration)`.
    pub gamma: f64,
    /// Contact time measured from the support foot's touchdown (s).
    pub duration: f64,
    /// Absolute contact time (s).
    pub contact_time: f64,
    /// DCM offset `zeta - p` at contact (m).
    pub dcm_offset: Vector2<f64>,
    /// Lateral direction of this step.
    pub side: LateralDirection,
}

impl Step {
    /// Predicted DCM at contact, `p + b`.
    pub fn dcm_at_contact(&self) -> Vector2<f64> {
        self.position + self.dcm_offset
    }
}

/// Nominal DCM offset after a step toward `direction`.
///
/// This is the fixed point of the step-to-step map
/// `b_{k+1} = E b_k - dp_k` with `E = exp(omega0 T_nom)`, sagittal
/// displacement `l_nom` and lateral displacement alternating between the
/// two nominal widths.
pub fn nominal_dcm_offset(params: &SequencerParams, direction: LateralDirection) -> Vector2<f64> {
    let e = params.gamma(params.duration.nom);
    let this = params.width(direction).nom;
    let other = params.width(direction.flip()).nom;
    Vector2::new(
        params.length.nom / (e - 1.0),
        (e * other + this) / (e * e - 1.0),
    )
}

/// Assemble the footstep QP for the given stance.
pub fn build_problem(
    params: &SequencerParams,
    ctx: &StanceContext,
) -> Result<QpProblem, SequencerError> {
    params.validate()?;
    ctx.validate()?;

    let width = params.width(ctx.next_direction);
    let offset_nom = nominal_dcm_offset(params, ctx.next_direction);
    let origin = ctx.window_origin();
    let gamma_nom = params.gamma(origin + params.duration.nom);
    let gamma_lo = params.gamma((origin + params.duration.min).max(ctx.elapsed));
    let gamma_hi = params.gamma(origin + params.duration.max);
    if gamma_lo > gamma_hi {
        return Err(SequencerError::InvalidBounds {
            lower: gamma_lo,
            upper: gamma_hi,
        });
    }

    let p0 = ctx.support;
    let weights = [
        params.alpha1,
        params.alpha1,
        params.alpha2,
        params.alpha3,
        params.alpha3,
    ];
    let targets = [
        p0.x + params.length.nom,
        p0.y + width.nom,
        gamma_nom,
        offset_nom.x,
        offset_nom.y,
    ];
    let hessian = DMatrix::from_diagonal(&DVector::from_iterator(
        NUM_VARS,
        weights.iter().map(|a| 2.0 * a),
    ));
    let linear = DVector::from_iterator(
        NUM_VARS,
        weights.iter().zip(&targets).map(|(a, r)| -2.0 * a * r),
    );
    let constant: f64 = weights.iter().zip(&targets).map(|(a, r)| a * r * r).sum();

    #[rustfmt::skip]
    let ineq = DMatrix::from_row_slice(NUM_INEQ, NUM_VARS, &[
         1.0,  0.0,  0.0, 0.0, 0.0,
        -1.0,  0.0,  0.0, 0.0, 0.0,
         0.0,  1.0,  0.0, 0.0, 0.0,
         0.0, -1.0,  0.0, 0.0, 0.0,
         0.0,  0.0,  1.0, 0.0, 0.0,
         0.0,  0.0, -1.0, 0.0, 0.0,
    ]);
    let ineq_rhs = DVector::from_vec(vec![
        p0.x + params.length.min,
        -(p0.x + params.length.max),
        p0.y + width.min,
        -(p0.y + width.max),
        gamma_lo,
        -gamma_hi,
    ]);

    let decay = (-params.omega0() * ctx.elapsed).exp();
    let coupling = (ctx.dcm - p0) * decay;
    #[rustfmt::skip]
    let eq = DMatrix::from_row_slice(NUM_EQ, NUM_VARS, &[
        1.0, 0.0, -coupling.x, 1.0, 0.0,
        0.0, 1.0, -coupling.y, 0.0, 1.0,
    ]);
    let eq_rhs = DVector::from_vec(vec![p0.x, p0.y]);

    Ok(QpProblem::new(hessian, linear)
        .with_inequalities(ineq, ineq_rhs)
        .with_equalities(eq, eq_rhs)
        .with_constant(constant))
}

/// Solve the footstep QP, returning the raw solution.
pub fn solve_qp(
    params: &SequencerParams,
    ctx: &StanceContext,
) -> Result<QpSolution, SequencerError> {
    let problem = build_problem(params, ctx)?;
    Ok(qp::solve(&problem)?)
}

/// Convert a QP solution vector into a step.
pub fn step_from_solution(params: &SequencerParams, ctx: &StanceContext, x: &DVector<f64>) -> Step {
    let gamma = x[IDX_GAMMA];
    let duration = gamma.ln() / params.omega0();
    Step {
        position: Vector2::new(x[IDX_PX], x[IDX_PY]),
        gamma,
        duration,
        contact_time: ctx.touchdown_time + duration,
        dcm_offset: Vector2::new(x[IDX_BX], x[IDX_BY]),
        side: ctx.next_direction,
    }
}

/// Plan the next footstep.
pub fn solve_step(params: &SequencerParams, ctx: &StanceContext) -> Result<Step, SequencerError> {
    let sol = solve_qp(params, ctx)?;
    Ok(step_from_solution(params, ctx, &sol.x))
}

/// Residual of the DCM dynamics equalities at a step, per axis.
pub fn dynamics_residual(
    params: &SequencerParams,
    ctx: &StanceContext,
    step: &Step,
) -> Vector2<f64> {
    let decay = (-params.omega0() * ctx.elapsed).exp();
    step.position + step.dcm_offset - ctx.support - (ctx.dcm - ctx.support) * decay * step.gamma
}
