//! DCM-based footstep sequencing for biped walking.
//!
//! The next footstep position, its timing and the DCM offset at contact are
//! the solution of a small QP built on the linear inverted pendulum. The
//! crate also provides the parametric sensitivity of that solution to DCM
//! measurement errors, fixed-horizon sequence generation, and a closed-loop
//! pendulum simulator.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod horizon;
pub mod qp;
pub mod sensitivity;
pub mod sequencer;
pub mod simulator;

pub use horizon::{generate_sequence, StepSequence};
pub use qp::{QpError, QpProblem, QpSolution};
pub use sensitivity::{dcm_sensitivity, SensitivityResult};
pub use sequencer::{solve_step, LateralDirection, SequencerParams, StanceContext, Step};
pub use simulator::{LipmState, Scenario};
