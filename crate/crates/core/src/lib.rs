//! Speaker voice similarity scoring over frozen layer-wise speech
//! representations.
//!
//! The crate is organised around the pipeline it implements:
//!
//! - [`repr`] reads and writes the `LRP1` representation format.
//! - [`dataset`] loads rated-pair manifests and splits datasets.
//! - [`model`] holds the scoring network: layer fusion, optional adapter,
//!   co-attention, distance and prediction head, plus exact gradients and
//!   the `SVS1` checkpoint container.
//! - [`train`] runs Adam with gradient accumulation and checkpoint selection.
//! - [`metrics`] computes LCC / SRCC / MSE at utterance and system level.

pub mod dataset;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod repr;
pub mod train;

pub use dataset::{load_manifest, split_dataset, Dataset, RatedPair, Sample};
pub use error::{Error, Result};
pub use metrics::{evaluate, mse, pearson, spearman, system_aggregate, MetricsReport};
pub use model::{
    forward, loss_and_grad, Gradients, Mode, ModelConfig, ModelDims, ModelParams, ReprSource,
    ScoreOutput,
};
pub use repr::{read_lrp, write_lrp, LayerwiseRepr};
pub use train::{
    adam_step, grad_check, train, train_epoch, AdamState, SelectionMetric, TrainConfig,
};
