use thiserror::Error;

pub use crate::annotations::AnnotationError;
pub use crate::imaging::ImagingError;
pub use crate::metrics::MetricsError;
pub use crate::model::ModelError;
pub use crate::splitting::SplitError;
pub use crate::synthgen::SynthError;
pub use crate::training::TrainError;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure category, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Invalid parameters or configuration.
    Config,
    /// Malformed or inconsistent input data.
    Data,
    /// Failures while running an otherwise valid job.
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Annotation(_) | Error::Imaging(_) => ErrorKind::Data,
            Error::Split(SplitError::Csv { .. }) | Error::Metrics(MetricsError::Csv { .. }) => ErrorKind::Data,
            Error::Split(_) | Error::Metrics(_) | Error::Synth(_) => ErrorKind::Config,
            Error::Model(e) => match e {
                ModelError::Config(_) => ErrorKind::Config,
                ModelError::Checkpoint(_) => ErrorKind::Data,
                _ => ErrorKind::Runtime,
            },
            Error::Train(e) => match e {
                TrainError::Config(_) | TrainError::EmptySplit(_) => ErrorKind::Config,
                _ => ErrorKind::Runtime,
            },
            Error::Io { .. } => ErrorKind::Data,
        }
    }
}
