use alloc::string::String;
use core::fmt;

/// Errors shared across the algorithmic core.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Index arguments outside the valid range of a trajectory.
    Range { what: String },
    /// A configuration value is infeasible or out of range.
    Config(String),
    /// Replayed observation differs from the stored one (corrupted trajectory).
    ReplayDivergence { step: usize, expected: String, got: String },
    /// Attempt to step an environment that already terminated.
    Terminated,
    /// An empty action sequence where at least one step is required.
    EmptySequence,
    /// A stored segment action is not in the candidate set at its state.
    InvalidSegment { step: usize, action: String },
    /// The scripted planner cannot realize a goal.
    Planner(String),
    /// A batch contained no usable examples.
    EmptyBatch,
    /// Talking to an external policy or reflector failed.
    PolicyIo(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Range { what } => write!(f, "index out of range: {what}"),
            CoreError::Config(msg) => write!(f, "invalid configuration: {msg}"),
            CoreError::ReplayDivergence { step, expected, got } => write!(
                f,
                "replay divergence at step {step}: expected {expected:?}, got {got:?}"
            ),
            CoreError::Terminated => write!(f, "environment already terminated"),
            CoreError::EmptySequence => write!(f, "empty action sequence"),
            CoreError::InvalidSegment { step, action } => {
                write!(f, "segment action {action:?} at step {step} is not a valid candidate")
            }
            CoreError::Planner(msg) => write!(f, "planner error: {msg}"),
            CoreError::EmptyBatch => write!(f, "batch contains no usable examples"),
            CoreError::PolicyIo(msg) => write!(f, "policy I/O error: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
