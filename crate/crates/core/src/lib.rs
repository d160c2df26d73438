//! Composed image+text retrieval: a small reverse-mode autodiff engine,
//! a synthetic CSS scene dataset, image and text encoders, composition
//! strategies (TIRG and baselines), a softmax metric-learning loss, and
//! exact recall-at-K evaluation.

pub mod composition;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod metric;
pub mod model;
pub mod nn;
pub mod retrieval;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use composition::{CompositionConfig, LayerMode, Strategy};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use metric::{Kernel, LossConfig};
pub use model::{Model, ModelConfig};
pub use retrieval::{EmbeddedDatabase, EvalConfig, EvalReport};
pub use tensor::{Graph, ParamStore, Tensor, Var};
pub use train::{train, TrainConfig, TrainRecord};
