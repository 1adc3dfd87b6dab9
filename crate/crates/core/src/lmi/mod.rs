//! Semidefinite feasibility and log-det problems over matrix variables, each
//! solution re-checked by eigen-decomposition.

mod conic;
mod expr;
mod solver;

pub use conic::{BackendResult, BackendStatus, ClarabelBackend, Cone, ConeBlock, ConicProblem, SdpBackend};
pub use expr::{AffineExpr, MatrixVar};
pub use solver::{
    is_positive_definite, schur_check, ConstraintKind, LmiConstraint, LmiSolution, LmiSolver, Sense, SolverStatus,
    DEFAULT_MARGIN, DEFAULT_TOLERANCE,
};
