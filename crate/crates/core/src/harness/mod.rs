//! Synthetic open-set detection: a scene generator whose class features sit
//! on the class embeddings, a linear toy detector trained with the full
//! objective, and the module-ablation runner.

mod ablate;
mod dataset;
pub mod model;
mod train;

use thiserror::Error;

use crate::embeddings::EmbeddingError;
use crate::losses::LossError;
use crate::metrics::MetricsError;

pub use ablate::{ablate, ablate_on, run_case, AblationRow, CaseResult};
pub use dataset::{
    generate_dataset, generate_dataset_with_embeddings, Dataset, DatasetSpec, Proposal, SceneObject, SyntheticScene, GEOMETRY_CHANNELS,
    NEGATIVE_MAX_IOU, POSITIVE_IOU,
};
pub use model::{forward, ProposalOutput, ToyDetector};
pub use train::{
    batch_loss_parts, batch_objective, predict, predict_all, sample_batch, train, train_on, Batch,
    ModuleSwitches, TrainConfig, TrainOutcome, NEGATIVES_PER_POSITIVE, OBJECTNESS_CUTOFF,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model: {0}")]
    Model(String),
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}
