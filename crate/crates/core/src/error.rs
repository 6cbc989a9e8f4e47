//! Crate error type.

use thiserror::Error;

/// Errors raised across the catalog, feature, model and pipeline layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("insufficient eligible entities: need {needed}, found {found} (deficit {})", needed - found)]
    InsufficientEntities { needed: usize, found: usize },

    #[error("corpus needs at least {min} samples for a split, got {got}")]
    CorpusTooSmall { min: usize, got: usize },

    #[error("line {line}: {msg}")]
    CorpusLine { line: usize, msg: String },

    #[error("input shorter than one frame: {got_ms} ms < {frame_ms} ms")]
    InputTooShort { got_ms: f64, frame_ms: u32 },

    #[error("sample rate too low: {got} Hz < {min} Hz")]
    SampleRateTooLow { got: u32, min: u32 },

    #[error("empty text")]
    EmptyText,

    #[error("audio too short for the encoder: {frames} frames < minimum {min}")]
    TooFewFrames { frames: usize, min: usize },

    #[error("degenerate embedding (zero norm)")]
    DegenerateEmbedding,

    #[error("degenerate ROC: labels contain a single class")]
    DegenerateRoc,

    #[error("shape mismatch: {context} expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("description count {n} exceeds bank size {bank} for class {class}")]
    DescriptionBankExceeded {
        class: String,
        n: usize,
        bank: usize,
    },

    #[error(
        "non-finite loss at step {step}: bce={bce}, con={con}, lambda={lambda}, grad norms {grad_norms}"
    )]
    NonFiniteLoss {
        step: usize,
        bce: f64,
        con: f64,
        lambda: f64,
        grad_norms: String,
    },

    #[error("checkpoint is corrupt or truncated: {0}")]
    BadCheckpoint(String),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}
