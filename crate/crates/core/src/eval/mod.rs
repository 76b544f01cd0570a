//! Frozen-encoder linear probes, the metric suite and cosine retrieval.

mod metrics;
mod probe;
mod protocol;
mod retrieval;

pub use metrics::{
    accuracy, confusion_matrix, mean_iou, mean_top_k_accuracy, micro_f1, top_k_accuracy,
    top_k_indices,
};
pub use probe::{
    fit_linear_probe, ProbeConfig, ProbeHead, ProbeTargets, ProbeTask, PROBE_INIT_BOUND,
};
pub use protocol::{
    encounter_rates_at_tiles, run_probe, site_split_alternating, site_split_by_class,
    species_sets_at_tiles, tile_sites, ProbeReport, SiteSplit,
};
pub use retrieval::{
    build_index, fit_to_model, project_query, query_index, tile_text_embeddings, zero_shot_batch,
    zero_shot_classify, RetrievalIndex,
};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::encoders::ModelError;
use crate::numerics::NumericsError;

/// Sigmoid threshold turning multi-label probabilities into predicted sets.
pub const MULTILABEL_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("length mismatch: {left} vs {right}")]
    Length { left: usize, right: usize },
    #[error("no samples")]
    Empty,
    #[error("label {0} out of range for {1} classes")]
    Label(usize, usize),
    #[error("class {0} has no training examples")]
    EmptyClass(usize),
    #[error("{0}")]
    Task(String),
    #[error("expected a matrix, got shape {0:?}")]
    Shape(Vec<usize>),
    #[error("{0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EvalError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
