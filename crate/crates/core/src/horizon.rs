//! Fixed-horizon step sequencing and the swing/CoM reference functions.
//!
//! A sequence is generated by solving the single-step QP repeatedly, each
//! solve starting from the previous solution: the planned landing becomes
//! the support, its contact time the new touchdown, and the predicted DCM
//! `p + b` the new measurement. Generation stops once a contact time
//! reaches `t0 + horizon`.

use nalgebra::Vector2;
use thiserror::Error;

use crate::sequencer::{self, SequencerError, SequencerParams, StanceContext, Step};
use crate::simulator::LipmState;

/// Default cap on the number of generated steps.
pub const DEFAULT_MAX_STEPS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HorizonError {
    #[error("step {index}: {source}")]
    Step {
        index: usize,
        #[source]
        source: SequencerError,
    },
    #[error("horizon {horizon} s needs more than {max_steps} steps")]
    TooManySteps { horizon: f64, max_steps: usize },
    #[error("invalid horizon {0} s")]
    InvalidHorizon(f64),
    #[error("{0}")]
    Domain(String),
}

/// Planned steps covering a horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSequence {
    pub steps: Vec<Step>,
    /// Generation time (s).
    pub t0: f64,
    /// Horizon length (s).
    pub horizon: f64,
    /// Predicted DCM at each contact, `p + b`.
    pub zeta_chain: Vec<Vector2<f64>>,
}

impl StepSequence {
    /// Mean forward velocity between the first and last planned contacts.
    pub fn mean_velocity(&self) -> Option<f64> {
        let first = self.steps.first()?;
        let last = self.steps.last()?;
        let dt = last.contact_time - first.contact_time;
        (dt > 0.0).then(|| (last.position.x - first.position.x) / dt)
    }

    /// Index of the last step whose contact lies before the horizon end.
    pub fn last_before_horizon(&self) -> Option<usize> {
        let end = self.t0 + self.horizon;
        self.steps.iter().rposition(|s| s.contact_time <= end)
    }
}

/// Generate steps until a contact time reaches `t0 + horizon`.
pub fn generate_sequence(
    params: &SequencerParams,
    initial: &StanceContext,
    horizon: f64,
) -> Result<StepSequence, HorizonError> {
    generate_sequence_capped(params, initial, horizon, DEFAULT_MAX_STEPS)
}

pub fn generate_sequence_capped(
    params: &SequencerParams,
    initial: &StanceContext,
    horizon: f64,
    max_steps: usize,
) -> Result<StepSequence, HorizonError> {
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(HorizonError::InvalidHorizon(horizon));
    }
    let t0 = initial.now();
    let end = t0 + horizon;
    let mut ctx = *initial;
    let mut steps = Vec::new();
    let mut zeta_chain = Vec::new();
    loop {
        let step = sequencer::solve_step(params, &ctx).map_err(|source| HorizonError::Step {
            index: steps.len(),
            source,
        })?;
        steps.push(step);
        zeta_chain.push(step.dcm_at_contact());
        if step.contact_time >= end {
            break;
        }
        if steps.len() >= max_steps {
            return Err(HorizonError::TooManySteps { horizon, max_steps });
        }
        ctx = StanceContext {
            support: step.position,
            elapsed: 0.0,
            dcm: step.dcm_at_contact(),
            next_direction: step.side.flip(),
            anchor: ctx.anchor,
            touchdown_time: step.contact_time,
        };
    }
    Ok(StepSequence {
        steps,
        t0,
        horizon,
        zeta_chain,
    })
}

/// Swing-foot height reference over a step of duration `t_f` with apex `height`.
///
/// Height and vertical velocity vanish at both ends; the apex is reached at
/// `t_f / 2`.
pub fn swing_height_reference(t: f64, t_f: f64, height: f64) -> Result<f64, HorizonError> {
    if !(t_f > 0.0) {
        return Err(HorizonError::Domain(format!(
            "step duration {t_f} must be positive"
        )));
    }
    if !(0.0..=t_f).contains(&t) {
        return Err(HorizonError::Domain(format!("time {t} outside [0, {t_f}]")));
    }
    let s = t / t_f;
    Ok(16.0 * height * s * s * (s * s - 2.0 * s + 1.0))
}

/// Terminal CoM reference: the CoM predicted at the horizon end from the
/// CoM and DCM at the last contact before it, with the DCM held at its
/// contact value.
pub fn com_terminal_reference(
    com_at_contact: Vector2<f64>,
    dcm_at_contact: Vector2<f64>,
    contact_time: f64,
    horizon_end: f64,
    omega0: f64,
) -> Vector2<f64> {
    (com_at_contact - dcm_at_contact) * (omega0 * (contact_time - horizon_end)).exp()
        + dcm_at_contact
}

/// Terminal CoM reference for a sequence, propagating the current LIPM
/// state through the planned contacts up to the last one before the
/// horizon end.
pub fn sequence_com_reference(state: &LipmState, seq: &StepSequence) -> Option<Vector2<f64>> {
    let last = seq.last_before_horizon()?;
    let mut s = *state;
    for step in &seq.steps[..=last] {
        s = s.propagate((step.contact_time - s.time).max(0.0));
        s = s.touchdown(step, Vector2::zeros());
    }
    let contact = &seq.steps[last];
    Some(com_terminal_reference(
        s.com,
        contact.dcm_at_contact(),
        contact.contact_time,
        seq.t0 + seq.horizon,
        state.omega0,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequencer::{nominal_dcm_offset, LateralDirection};
    use approx::assert_relative_eq;

    fn nominal_start(params: &SequencerParams) -> StanceContext {
        let support = Vector2::new(0.0, 0.125);
        let dcm = support + nominal_dcm_offset(params, LateralDirection::Positive);
        StanceContext::new(support, 0.0, dcm, LateralDirection::Negative)
    }

    #[test]
    fn zero_horizon_yields_one_step() {
        let p = SequencerParams::default();
        let seq = generate_sequence(&p, &StanceContext::reference(), 0.0).unwrap();
        assert_eq!(seq.steps.len(), 1);
    }

    #[test]
    fn nominal_start_walks_nominally() {
        let p = SequencerParams::default();
        let seq = generate_sequence(&p, &nominal_start(&p), 3.0).unwrap();
        assert_relative_eq!(seq.mean_velocity().unwrap(), 0.1 / 0.3, max_relative = 1e-6);
        for pair in seq.steps.windows(2) {
            assert_ne!(pair[0].side, pair[1].side);
            assert!(pair[1].contact_time > pair[0].contact_time);
        }
        assert!(seq.steps.last().unwrap().contact_time >= 3.0);
    }

    #[test]
    fn chain_feeds_predicted_dcm_forward() {
        let p = SequencerParams::default();
        let ctx = StanceContext::reference();
        let seq = generate_sequence(&p, &ctx, 3.0).unwrap();
        let first = seq.steps[0];
        assert_eq!(seq.zeta_chain[0], first.position + first.dcm_offset);

        // regenerate from the state after the first step; the tail must match
        let next = StanceContext {
            support: first.position,
            elapsed: 0.0,
            dcm: first.dcm_at_contact(),
            next_direction: first.side.flip(),
            anchor: ctx.anchor,
            touchdown_time: first.contact_time,
        };
        let tail = generate_sequence(&p, &next, seq.t0 + seq.horizon - first.contact_time).unwrap();
        assert_eq!(&tail.steps[..], &seq.steps[1..]);
    }

    #[test]
    fn step_cap_is_an_error() {
        let p = SequencerParams::default();
        let err = generate_sequence_capped(&p, &StanceContext::reference(), 3.0, 3).unwrap_err();
        assert!(matches!(err, HorizonError::TooManySteps { .. }));
    }

    #[test]
    fn negative_horizon_is_rejected() {
        let p = SequencerParams::default();
        assert!(generate_sequence(&p, &StanceContext::reference(), -1.0).is_err());
    }

    #[test]
    fn swing_boundary_values() {
        assert_eq!(swing_height_reference(0.0, 0.3, 0.05).unwrap(), 0.0);
        assert!(swing_height_reference(0.3, 0.3, 0.05).unwrap().abs() < 1e-18);
        assert_relative_eq!(
            swing_height_reference(0.15, 0.3, 0.05).unwrap(),
            0.05,
            epsilon = 1e-15
        );
    }

    #[test]
    fn swing_polynomial_matches_expanded_form() {
        let (tf, h) = (0.37, 0.04);
        for k in 0..=20 {
            let t = tf * k as f64 / 20.0;
            let expanded = 16.0 * h / tf.powi(4) * t.powi(4) - 32.0 * h / tf.powi(3) * t.powi(3)
                + 16.0 * h / tf.powi(2) * t.powi(2);
            assert_relative_eq!(
                swing_height_reference(t, tf, h).unwrap(),
                expanded,
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn swing_velocity_vanishes_at_ends() {
        let (tf, h) = (0.3, 0.05);
        let d = 1e-7 * tf;
        let start = (swing_height_reference(d, tf, h).unwrap() - 0.0) / d;
        let end = (0.0 - swing_height_reference(tf - d, tf, h).unwrap()) / d;
        // one-sided differences of a function with zero slope are O(d)
        assert!(start.abs() < 1e-6 && end.abs() < 1e-6, "{start} {end}");
    }

    #[test]
    fn swing_outside_domain_is_an_error() {
        assert!(swing_height_reference(-0.01, 0.3, 0.05).is_err());
        assert!(swing_height_reference(0.31, 0.3, 0.05).is_err());
        assert!(swing_height_reference(0.0, 0.0, 0.05).is_err());
    }

    #[test]
    fn com_reference_fixed_points() {
        let z = Vector2::new(0.4, -0.1);
        assert_eq!(com_terminal_reference(z, z, 0.3, 2.0, 5.6), z);
        let c = Vector2::new(0.1, 0.2);
        assert_relative_eq!(
            com_terminal_reference(c, z, 2.0, 2.0, 5.6),
            c,
            epsilon = 1e-16
        );
    }
}
