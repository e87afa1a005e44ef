//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ── tensor engine ────────────────────────────────────────────────
    #[error("{op}: shape mismatch: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    // ── optimizer / parameters ───────────────────────────────────────
    #[error("parameter `{name}`: missing gradient")]
    MissingGrad { name: String },
    #[error("parameter `{name}`: {detail}")]
    BadParam { name: String, detail: String },

    // ── preprocessing ────────────────────────────────────────────────
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("series `{series_id}` too short: need at least {needed} points, got {got}")]
    SeriesTooShort {
        series_id: String,
        needed: usize,
        got: usize,
    },
    #[error("frequency {freq} Hz is at or above the Nyquist limit ({nyquist} Hz)")]
    NyquistViolation { freq: f64, nyquist: f64 },
    #[error("affine scale {value} is below the invertibility floor 1e-8")]
    ScaleTooSmall { value: f64 },
    #[error("csv `{path}`: {detail}")]
    CsvFormat { path: String, detail: String },
    #[error("csv `{path}` line {line}: {detail}")]
    CsvValue {
        path: String,
        line: u64,
        detail: String,
    },

    // ── objective ────────────────────────────────────────────────────
    #[error("length mismatch: {lhs} targets vs {rhs} predictions")]
    LengthMismatch { lhs: usize, rhs: usize },

    // ── checkpoint ───────────────────────────────────────────────────
    #[error("checkpoint: bad magic")]
    BadMagic,
    #[error("checkpoint: unsupported format version {got}")]
    VersionMismatch { got: u32 },
    #[error("checkpoint: truncated or malformed file")]
    Truncated,
    #[error("checkpoint: CRC mismatch (file corrupted)")]
    CrcMismatch,
    #[error("checkpoint: unknown parameter `{name}`")]
    UnknownParam { name: String },
    #[error("checkpoint: missing parameter `{name}`")]
    MissingParam { name: String },
    #[error("config mismatch on fields: {}", fields.join(", "))]
    ConfigMismatch { fields: Vec<String> },

    // ── configuration ────────────────────────────────────────────────
    #[error("invalid config `{field}`: {detail}")]
    InvalidConfig { field: String, detail: String },

    // ── training ─────────────────────────────────────────────────────
    #[error("training aborted at step {step}: {detail}")]
    TrainAbort { step: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
