use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Variants mirror the failure modes of the
/// individual modules; file-shape problems surface as [`Error::Parse`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("cycle detected while walking from bus {bus} toward the head")]
    CycleDetected { bus: usize },

    #[error("bus {bus} is not connected to the head bus")]
    DisconnectedBus { bus: usize },

    #[error("phase mismatch on segment ({from},{to}): {msg}")]
    PhaseMismatch { from: usize, to: usize, msg: String },

    #[error("more than one segment terminates at bus {bus}")]
    DuplicateSegmentForChild { bus: usize },

    #[error("impedance matrix of segment ({from},{to}) is singular")]
    SingularImpedance { from: usize, to: usize },

    #[error("unknown bus {bus}")]
    UnknownBus { bus: usize },

    #[error("degenerate voltage pair for delta connection {pair} (|V - V'| = {gap:.3e} p.u.)")]
    DegenerateVoltagePair { pair: &'static str, gap: f64 },

    #[error("phase {phase} required by {what} is absent at bus {bus}")]
    MissingPhase {
        bus: usize,
        phase: char,
        what: &'static str,
    },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("sweep did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("zero voltage entry encountered")]
    ZeroVoltage,

    #[error("linear-model parameters are missing or mis-sized for {what}")]
    MissingSegmentParams { what: String },

    #[error("linear system is singular or ill-conditioned (condition estimate {cond:.3e})")]
    SingularSystem { cond: f64 },

    #[error("MAPE truth vector has a zero entry at index {index}")]
    ZeroTruthEntry { index: usize },

    #[error("report step indices do not match: {msg}")]
    StepMismatch { msg: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("simulation step {step}: {source}")]
    SimulationStep { step: usize, source: Box<Error> },

    #[error("parse error: {msg}")]
    Parse { msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse { msg: msg.into() }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        // serde_json reports 0/0 for non-syntactic errors
        Error::Parse {
            msg: format!("{} (line {}, column {})", e, e.line(), e.column()),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse {
            msg: e.to_string(),
        }
    }
}
