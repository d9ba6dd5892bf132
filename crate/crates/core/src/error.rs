use std::io::ErrorKind;

use thiserror::Error;

use crate::compose::ComposeError;
use crate::dataset::DatasetError;
use crate::embstore::StoreError;
use crate::isotropy::IsotropyError;
use crate::metrics::MetricError;
use crate::projection::ProjectionError;
use crate::synth::SynthError;

/// Process exit codes used by the command-line tool.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const VALIDATION: i32 = 2;
    pub const MISSING_DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Isotropy(#[from] IsotropyError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("record {0:?} not found")]
    MissingRecord(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

fn io_code(e: &std::io::Error) -> i32 {
    match e.kind() {
        ErrorKind::NotFound => exit::MISSING_DATA,
        _ => exit::VALIDATION,
    }
}

fn store_code(e: &StoreError) -> i32 {
    match e {
        StoreError::MissingRow(_) => exit::MISSING_DATA,
        StoreError::NonFiniteVector(_) => exit::NUMERIC,
        StoreError::Io(io) => io_code(io),
        _ => exit::VALIDATION,
    }
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dataset(DatasetError::Io(io)) => io_code(io),
            Error::Dataset(_) | Error::Config(_) | Error::Synth(SynthError::ConfigInvalid(_)) => {
                exit::VALIDATION
            }
            Error::Synth(SynthError::Store(e)) | Error::Store(e) => store_code(e),
            Error::Compose(e) => match e {
                ComposeError::MissingRow(_) | ComposeError::MissingRows(_) => exit::MISSING_DATA,
                ComposeError::Store(s) => store_code(s),
                ComposeError::Io(io) => io_code(io),
                ComposeError::Dataset(_) => exit::VALIDATION,
                _ => exit::VALIDATION,
            },
            Error::Projection(e) => match e {
                ProjectionError::NonFinite(_) => exit::NUMERIC,
                ProjectionError::Store(s) => store_code(s),
                ProjectionError::Io(io) => io_code(io),
                _ => exit::VALIDATION,
            },
            Error::Metric(MetricError::DimMismatch(..) | MetricError::LengthMismatch(..)) => {
                exit::VALIDATION
            }
            Error::Metric(_) => exit::NUMERIC,
            Error::Isotropy(IsotropyError::ShapeMismatch(..) | IsotropyError::NoDirections) => {
                exit::VALIDATION
            }
            Error::Isotropy(_) => exit::NUMERIC,
            Error::MissingRecord(_) => exit::MISSING_DATA,
            Error::Stage { source, .. } => source.exit_code(),
            Error::Io(io) => io_code(io),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(Error::Config("x".into()).exit_code(), exit::VALIDATION);
        assert_eq!(Error::MissingRecord("7".into()).exit_code(), exit::MISSING_DATA);
        assert_eq!(Error::Metric(MetricError::ConstantInput).exit_code(), exit::NUMERIC);
        let nf = std::io::Error::new(ErrorKind::NotFound, "gone");
        assert_eq!(Error::Io(nf).in_stage("train").exit_code(), exit::MISSING_DATA);
        assert_eq!(
            Error::Store(StoreError::NonFiniteVector(3)).exit_code(),
            exit::NUMERIC
        );
    }
}
