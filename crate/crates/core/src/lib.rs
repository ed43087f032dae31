//! Tsunami-driven travelling ionospheric disturbance detection from GNSS
//! sTEC-rate streams.
//!
//! Streams are cut into windows, encoded as Gramian angular difference
//! fields, classified by a small CNN, and filtered by cross-station vote
//! agreement before sequence-level scoring.

pub mod cnn;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod fpm;
pub mod gadf;
pub mod ingest;
pub mod pipeline;
pub mod seed;
pub mod synth;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Ingest(#[from] ingest::IngestError),
    #[error(transparent)]
    Gadf(#[from] gadf::GadfError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Cnn(#[from] cnn::CnnError),
    #[error(transparent)]
    Checkpoint(#[from] cnn::CheckpointError),
    #[error(transparent)]
    Fpm(#[from] fpm::FpmError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("{0}")]
    Data(String),
}

impl Error {
    /// 1 usage or configuration, 2 bad or missing data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use cnn::CnnError;
        match self {
            Error::Usage(_) | Error::Synth(synth::SynthError::InvalidConfig(_)) => 1,
            Error::Cnn(CnnError::InvalidConfig(_) | CnnError::InvalidTrainConfig(_)) => 1,
            Error::Dataset(dataset::DatasetError::BadShare(_) | dataset::DatasetError::BadFraction(_)) => 1,
            Error::Cnn(CnnError::NonFinite { .. }) => 3,
            _ => 2,
        }
    }

    pub(crate) fn file(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::File {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
