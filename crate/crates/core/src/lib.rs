//! Two-stage product poster generation at desk scale.
//!
//! A discrete-diffusion planner places text, underlay and product boxes
//! conditioned on text and product embeddings; a geometric front-end turns
//! layouts and product cutouts into control tensors; a heuristic composer
//! renders posters; and layout metrics score the results.

pub mod composer;
pub mod dataset;
pub mod diffusion;
pub mod embed;
pub mod layout;
pub mod metrics;
pub mod pipeline;
pub mod plannet;
pub mod render;
pub mod synth;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller-supplied data or configuration is unusable.
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("no path from z0 = {z0} to z_t = {z_t} at t = {t}")]
    ImpossiblePair { z_t: usize, z0: usize, t: usize },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Nn(#[from] ppg_nn::NnError),
    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File { path: path.into(), source }
    }

    /// Process exit code: 2 for bad input, 3 for failures during a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid(_) | Error::File { .. } | Error::Json(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
