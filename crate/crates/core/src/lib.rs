//! Temporal co-investment networks of venture-backed firms: bipartite deal
//! graphs, yearly projections, node centralities, communities, funding
//! trajectories and the regressions linking network position to funding.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix it to `f64`.

pub mod centrality;
pub mod community;
pub mod fda;
pub mod graph;
pub mod ingest;
pub mod linalg;
pub mod pipeline;
pub mod scalar;
pub mod stats;
pub mod synth;

pub use scalar::Scalar;
pub use pipeline::{Pipeline, PipelineConfig, Stage};

use std::path::PathBuf;
use thiserror::Error;

pub type CentralityTable = centrality::CentralityTable<f64>;
pub type FirmFeatureVector = centrality::FirmFeatureVector<f64>;
pub type TrajectoryGrid = fda::TrajectoryGrid<f64>;
pub type RegimeLabeling = fda::RegimeLabeling<f64>;
pub type FeatureMatrix = stats::FeatureMatrix<f64>;
pub type LogisticFit = stats::LogisticFit<f64>;
pub type LinearFit = stats::LinearFit<f64>;
pub type FunctionalFit = stats::FunctionalFit<f64>;
pub type ResamplingSummary = stats::ResamplingSummary<f64>;

/// Pipeline-level failure, grouped by process exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Data(_) | Error::Io { .. } => 1,
            Error::Config(_) => 2,
            Error::Numerical(_) => 3,
        }
    }
}

impl From<ingest::IngestError> for Error {
    fn from(e: ingest::IngestError) -> Self {
        Error::Data(e.to_string())
    }
}

impl From<graph::GraphError> for Error {
    fn from(e: graph::GraphError) -> Self {
        Error::Data(e.to_string())
    }
}

impl From<fda::FdaError> for Error {
    fn from(e: fda::FdaError) -> Self {
        match e {
            fda::FdaError::BadStep { .. } => Error::Config(e.to_string()),
            _ => Error::Data(e.to_string()),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Data(e.to_string())
    }
}
