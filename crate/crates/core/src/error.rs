use thiserror::Error;

use crate::{epimodel, geonet, glm, inference, ingest, simulate};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Umbrella error for pipeline-level code that touches several modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ingest(#[from] ingest::IngestError),
    #[error(transparent)]
    Geo(#[from] geonet::GeoError),
    #[error(transparent)]
    Model(#[from] epimodel::ModelError),
    #[error(transparent)]
    Fit(#[from] inference::FitError),
    #[error(transparent)]
    Sim(#[from] simulate::SimError),
    #[error(transparent)]
    Glm(#[from] glm::GlmError),
    #[error("{0}")]
    Usage(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
