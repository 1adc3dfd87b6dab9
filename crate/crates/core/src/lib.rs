//! Simplex-enabled safe continual learning on a cart-pole.
//!
//! * [`lmi`] — semidefinite feasibility / log-det problems with independent verification
//! * [`geometry`] — safety set, safety envelope, action set and their containments
//! * [`student`] — model-based gain and envelope synthesis for the learning student
//! * [`teacher`] — patch synthesis for the verified backup controller
//! * [`coordinator`] — switching and replay-correction state machine
//! * [`drl`] — residual policy, safety-embedded reward and a DDPG learner
//! * [`cartpole`] — the plant and its linearizations
//! * [`harness`] — configuration, experiment runners and exports

// Clarabel's SDP cones need LAPACK; keep the system OpenBLAS linked.
use openblas_src as _;

pub mod error;
pub mod linalg;
pub mod cartpole;
pub mod geometry;
pub mod lmi;
pub mod student;
pub mod teacher;
pub mod coordinator;
pub mod drl;
pub mod harness;

pub use error::{Error, Result};
