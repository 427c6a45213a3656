use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("torch error: {0}")]
    Torch(#[from] tch::TchError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("row {row}: missing column `{column}`")]
    MissingColumn { row: usize, column: String },
    #[error("row {row}: malformed box `{detail}`")]
    MalformedBox { row: usize, detail: String },
    #[error("row {row}: unknown class `{class}`")]
    UnknownClass { row: usize, class: String },
    #[error("row {row}: label `{value}` for class `{class}` is not 0 or 1")]
    InvalidLabel { row: usize, class: String, value: String },
    #[error("class {class}: need {needed} samples, only {available} available")]
    InsufficientSamples { class: usize, needed: usize, available: usize },
    #[error("class {class} has no positive samples to contaminate")]
    EmptyPositiveSet { class: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("class index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,

    #[error("class {0} has only one label value")]
    DegenerateClass(usize),
    #[error("class {0} has no correctly predicted positives")]
    NoCorrectPositives(usize),
    #[error("annotation region is empty")]
    EmptyAnnotation,
    #[error("attribution is identically zero")]
    ZeroAttribution,
    #[error("tag region is empty")]
    EmptyTagRegion,

    #[error("class {0} has no box annotations")]
    NoAnnotations(usize),
    #[error("mask is empty")]
    EmptyMask,
    #[error("guidance region overlaps the exclusion box")]
    ConflictingRegions,

    #[error("non-finite loss at step {step}, term `{term}`")]
    NaNLoss { step: usize, term: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image { path: path.into(), source }
    }

    /// True for errors caused by bad input data rather than numerics or I/O.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Csv(_)
                | Error::Image { .. }
                | Error::MissingColumn { .. }
                | Error::MalformedBox { .. }
                | Error::UnknownClass { .. }
                | Error::InvalidLabel { .. }
                | Error::InsufficientSamples { .. }
                | Error::EmptyPositiveSet { .. }
                | Error::DegenerateClass(_)
                | Error::NoCorrectPositives(_)
                | Error::EmptyAnnotation
                | Error::EmptyTagRegion
                | Error::NoAnnotations(_)
                | Error::EmptyMask
                | Error::ConflictingRegions
                | Error::ShapeMismatch(_)
                | Error::IndexOutOfRange { .. }
        )
    }
}
