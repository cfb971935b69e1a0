//! Datasets: clips, direction labels, synthetic generators, VQA rendering,
//! manifests, and paired evaluation sets.

pub mod clip;
pub mod manifest;
pub mod synthetic;
pub mod vqa;

use std::path::PathBuf;
use thiserror::Error;

/// Errors raised by dataset construction and loading.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("unknown template id {0}; valid ids are 1..=4")]
    UnknownTemplate(u32),
    #[error("resolution {h}x{w} too small to place the dot (need at least {min}x{min})")]
    ResolutionTooSmall { h: usize, w: usize, min: usize },
    #[error("direction undecidable for kind {0}")]
    Undecidable(String),
    #[error("manifest {path}: line {line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("clip file {path}: {msg}")]
    ClipFile { path: PathBuf, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
