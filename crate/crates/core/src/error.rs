use std::path::PathBuf;

use crate::config::ConfigError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {}", join(.0))]
    ConfigInvalid(Vec<ConfigError>),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("image error: {0}")]
    Image(String),

    #[error("segmentation backend not loaded: {0}")]
    BackendNotLoaded(String),
    #[error("backend cannot segment {got}x{got} input (size must be a multiple of {multiple})")]
    ResolutionMismatch { got: usize, multiple: usize },
    #[error("foreground class set is empty or covers every class")]
    EmptyForegroundSet,
    #[error("segmentation cache entry corrupt: {0}")]
    CacheCorrupt(String),

    #[error("unsupported architecture: {0}")]
    UnsupportedArch(String),
    #[error("channel mismatch: network expects {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("segmentation map kind mismatch: {0}")]
    KindMismatch(String),
    #[error("non-finite loss in term `{0}`")]
    NonFiniteLoss(String),
    #[error("paired objective received a batch without alignment metadata")]
    UnpairedDataInPairedMode,
    #[error("objective term `{0}` has non-zero weight but was not computed")]
    MissingFragment(String),

    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("curation produced no images: {0}")]
    EmptyResult(String),
    #[error("missing weights: {0}")]
    MissingWeights(String),
    #[error("dataset layout {layout} cannot be sampled in {mode} mode")]
    LayoutModeMismatch { layout: String, mode: String },

    #[error("checkpoint has no generator for role `{0}`")]
    MissingGeneratorRole(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("disk full while writing {0}")]
    DiskFull(PathBuf),

    #[error("feature extractor mismatch: `{0}` vs `{1}`")]
    ExtractorMismatch(String, String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
}

fn join(errs: &[ConfigError]) -> String {
    errs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ")
}

impl Error {
    /// Stable machine-readable name of the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ConfigInvalid(errs) => match errs.first() {
                Some(e) => e.code(),
                None => "ConfigInvalid",
            },
            Error::Shape(_) => "ShapeError",
            Error::Io { .. } => "IoError",
            Error::Parse(_) => "ParseError",
            Error::Image(_) => "ImageError",
            Error::BackendNotLoaded(_) => "BackendNotLoaded",
            Error::ResolutionMismatch { .. } => "ResolutionMismatch",
            Error::EmptyForegroundSet => "EmptyForegroundSet",
            Error::CacheCorrupt(_) => "CacheCorrupt",
            Error::UnsupportedArch(_) => "UnsupportedArch",
            Error::ChannelMismatch { .. } => "ChannelMismatch",
            Error::KindMismatch(_) => "KindMismatch",
            Error::NonFiniteLoss(_) => "NonFiniteLoss",
            Error::UnpairedDataInPairedMode => "UnpairedDataInPairedMode",
            Error::MissingFragment(_) => "MissingFragment",
            Error::UnknownCategory(_) => "UnknownCategory",
            Error::EmptyResult(_) => "EmptyResult",
            Error::MissingWeights(_) => "MissingWeights",
            Error::LayoutModeMismatch { .. } => "LayoutModeMismatch",
            Error::MissingGeneratorRole(_) => "MissingGeneratorRole",
            Error::Checkpoint(_) => "CheckpointFormat",
            Error::DiskFull(_) => "DiskFull",
            Error::ExtractorMismatch(..) => "ExtractorMismatch",
            Error::NumericalFailure(_) => "NumericalFailure",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        // ENOSPC
        if source.raw_os_error() == Some(28) {
            return Error::DiskFull(path);
        }
        Error::Io { path, source }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
