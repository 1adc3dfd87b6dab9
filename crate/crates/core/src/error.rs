use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or reference errors in a problem formulation.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate constraint in row {row}: {reason}")]
    DegenerateConstraint { row: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("synthesis infeasible: {reason} (failing families: {failing:?})")]
    SynthesisInfeasible { reason: String, failing: Vec<String> },

    #[error("teacher synthesis infeasible: {0}")]
    TeacherInfeasible(String),

    #[error("divergence at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 infeasible synthesis, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format(_) | Error::Json(_) | Error::Structural(_) => 2,
            Error::DegenerateConstraint { .. } => 2,
            Error::SynthesisInfeasible { .. } | Error::TeacherInfeasible(_) => 3,
            Error::Divergence { .. } | Error::Numerical(_) => 4,
            Error::Io(_) | Error::Csv(_) => 1,
        }
    }
}
