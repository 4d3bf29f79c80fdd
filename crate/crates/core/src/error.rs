use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("transform exceeds video length: needs {needed} frames, video has {available}")]
    TransformOutOfRange { needed: usize, available: usize },

    #[error("video too short: {video_len} frames cannot hold any allowed speed at clip length {clip_len}")]
    VideoTooShort { video_len: usize, clip_len: usize },

    #[error("invalid crop box {box_:?} for a {height}x{width} frame")]
    InvalidCrop {
        box_: (usize, usize, usize, usize),
        height: usize,
        width: usize,
    },

    #[error("invalid video tensor: {0}")]
    InvalidVideo(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate code: zero-norm vector at row {0}")]
    DegenerateCode(usize),

    #[error("malformed batch plan: {0}")]
    MalformedBatchPlan(String),

    #[error("label {label} out of range for a {classes}-way head")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible dataset geometry: {0}")]
    Geometry(String),

    #[error("malformed FVC file: {0}")]
    Fvc(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}; batch dumped to {dump:?}")]
    NonFiniteLoss { step: u64, dump: Option<PathBuf> },

    #[error("empty feature bank")]
    EmptyBank,

    #[error("degenerate training set: {0}")]
    Degenerate(String),

    #[error("plot rendering failed: {0}")]
    Plot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
