use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed recording header {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("signal size mismatch: header declares {expected} bytes, file has {actual}")]
    SignalSize { expected: usize, actual: usize },

    #[error("no mappable EEG channels")]
    NoChannels,

    #[error("invalid recording: {0}")]
    InvalidRecording(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("upsampling from {from} Hz to {to} Hz is disabled")]
    UpsamplingDisabled { from: f64, to: f64 },

    #[error("recording has {n_samples} samples, filter warm-up needs more than {warmup}")]
    TooShortForFilter { n_samples: usize, warmup: usize },

    #[error("recording has {n_samples} samples, fewer than one patch of {patch}")]
    TooShortForPatch { n_samples: usize, patch: usize },

    #[error("channel {0} is not in the montage")]
    UnknownChannel(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation in encoder layer {layer}")]
    NonFinite { layer: usize },

    #[error("loss diverged at step {step}")]
    Diverged { step: usize },

    #[error("empty mask: loss undefined")]
    EmptyMask,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("split is missing class {class} in {split}")]
    MissingClass { class: usize, split: &'static str },

    #[error("validation trace has {trace} entries for {checkpoints} checkpoints")]
    MisalignedTrace { trace: usize, checkpoints: usize },

    #[error("checkpoint config hash {found} does not match run config hash {expected}")]
    ConfigMismatch { expected: String, found: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("cell {cell}: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } | Error::MissingArtifact(_) => "io",
            Error::MalformedHeader { .. } | Error::SignalSize { .. } | Error::NoChannels => "format",
            Error::InvalidRecording(_) | Error::InvalidConfig(_) | Error::UpsamplingDisabled { .. } => {
                "config"
            }
            Error::TooShortForFilter { .. }
            | Error::TooShortForPatch { .. }
            | Error::UnknownChannel(_)
            | Error::Shape(_)
            | Error::EmptyMask
            | Error::Empty(_)
            | Error::LabelOutOfRange { .. }
            | Error::MissingClass { .. }
            | Error::MisalignedTrace { .. } => "input",
            Error::NonFinite { .. } | Error::Diverged { .. } => "numeric",
            Error::ConfigMismatch { .. } | Error::Checkpoint(_) => "checkpoint",
            Error::Cell { source, .. } => source.category(),
            Error::Json(_) | Error::Toml(_) => "format",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
