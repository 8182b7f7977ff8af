use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the estimation stack.
#[derive(Debug, Error)]
pub enum VseError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("simulation diverged at step {step}")]
    SimulationDiverged { step: usize },

    #[error("degenerate signal: clean measurements carry zero power (sequence {sequence})")]
    DegenerateSignal { sequence: usize },

    #[error("degenerate metric: truth sequence {sequence} has zero energy")]
    DegenerateMetric { sequence: usize },

    #[error("degenerate filter: all particle weights underflowed at step {step}")]
    DegenerateFilter { step: usize },

    #[error("training instability: non-finite gradient in `{parameter}`")]
    TrainingInstability { parameter: String },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDiverged { epoch: usize },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {found} (this build reads version {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("missing input for SMNR {smnr_db} dB: {what}")]
    MissingForSmnr { smnr_db: f64, what: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl VseError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VseError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerical breakdown rather than bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            VseError::SimulationDiverged { .. }
                | VseError::DegenerateFilter { .. }
                | VseError::TrainingInstability { .. }
                | VseError::TrainingDiverged { .. }
        )
    }
}

pub type Result<T, E = VseError> = std::result::Result<T, E>;
