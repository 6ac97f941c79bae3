//! Real/fake detection on precomputed image embeddings with a three-way head
//! (one real class, `K` fake clusters) trained jointly on a binary objective
//! and a balanced self-supervised clustering objective.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the command-line tool uses.

pub mod config;
pub mod data;
pub mod divergence;
mod io_util;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod sinkhorn;
pub mod theory;
pub mod trainer;

pub use config::{ConfigError, TrainConfig};
pub use data::{
    augment_view, batches, make_synthetic, read_dataset, write_dataset, DataError, EmbeddingDataset, Family,
    Label, Record, SyntheticSpec,
};
pub use divergence::{DiscreteDistribution, DivergenceError, Kl};
pub use io_util::{write_atomic, write_bytes_atomic};
pub use losses::{LossError, LossReport, LossWeights};
pub use matrix::{Matrix, MatrixError};
pub use metrics::{MetricError, MetricReport, ScoredSample};
pub use model::{ModelError, ModelShape, TriarchyLogits, TriarchyModel};
pub use scalar::Scalar;
pub use sinkhorn::{sinkhorn, AssignmentMatrix, SinkhornConfig, SinkhornError};
pub use theory::{run_theory_checks, TheoryConfig, TheoryReport};
pub use trainer::{evaluate, train, train_from, Evaluation, TrainError, TrainState};

pub type Matrix64 = Matrix<f64>;
pub type Model = TriarchyModel<f64>;
pub type Config = TrainConfig<f64>;
pub type State = TrainState<f64>;
pub type Assignment = AssignmentMatrix<f64>;
pub type Report = MetricReport<f64>;

/// Any error raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Sinkhorn(#[from] SinkhornError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
}
