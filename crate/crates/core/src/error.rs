use thiserror::Error;

/// Errors produced by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("pilot rank: pilot length L={pilot_length} is smaller than the number of users K={num_users}")]
    PilotRank { num_users: usize, pilot_length: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("coincident positions: {0} and {1} are at zero distance")]
    CoincidentPositions(String, String),

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("zero reference: {0}")]
    ZeroReference(&'static str),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version: file has version {found}, this build reads version {supported}")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("truncated {0}")]
    Truncated(&'static str),

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
