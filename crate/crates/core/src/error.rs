//! Crate-wide error type.

use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    #[error("channel list mismatch: expected the 18 standard leads, got {got:?}")]
    ChannelListMismatch { got: Vec<String> },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("unknown aux label {0:?}")]
    UnknownAuxLabel(String),

    #[error("annotation interval [{start}, {end}) out of range or malformed (record length {len})")]
    BadInterval { start: usize, end: usize, len: usize },

    #[error("overlapping annotation intervals at sample {at}")]
    OverlappingIntervals { at: usize },

    #[error("empty manifest")]
    EmptyManifest,

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("class index {got} out of range for {classes} classes")]
    ClassOutOfRange { got: usize, classes: usize },

    #[error("invalid filter spec: {0}")]
    InvalidFilterSpec(String),

    #[error("signal too short: need at least {need} samples, got {got}")]
    SignalTooShort { need: usize, got: usize },

    #[error("loss is not a scalar (shape {got:?})")]
    NonScalarLoss { got: Vec<usize> },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("observer failed: {0}")]
    Sink(String),
}
