//! Session-based recommendation over item causality and correlation graphs.
//!
//! The pipeline: [`ingest`] turns an interaction log into sessions,
//! [`graphs`] derives the session, effect, cause and correlation graphs,
//! [`model`] encodes items and sessions on a small autodiff engine
//! ([`numcore`]), [`trainer`] fits the parameters, [`eval`] ranks held-out
//! prefixes and [`explain`] attributes a recommendation to session items.
//! [`stats`] is the transition-asymmetry analysis.

pub mod checkpoint;
pub mod eval;
pub mod explain;
pub mod graphs;
pub mod ingest;
pub mod model;
pub mod numcore;
pub mod stats;
pub mod trainer;

use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use eval::{EvalError, Metrics, RankingResult};
pub use explain::{ExplainError, ExplanationReport};
pub use graphs::{CausalOptions, GraphError, GraphSet};
pub use ingest::{Dataset, IngestError, Session, Vocabulary};
pub use model::{Cgsr, EncodedItems, ModelConfig, ModelError, Parameters};
pub use numcore::NumError;
pub use stats::{AsymmetryGrid, StatsError};
pub use trainer::{TrainConfig, TrainError, TrainOutcome};

/// Any error the library can return.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}
