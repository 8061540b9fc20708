//! Hierarchical continual imitation learning at desk scale.

pub mod action;
pub mod adapter;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod harness;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod param;
pub mod perception;
pub mod policy;
pub mod seed;
pub mod skill;
pub mod tensor;
pub mod transformer;

pub use autograd::{Gradients, Graph, Var};
pub use config::{ExperimentConfig, ModelConfig, ParadigmKind, TrainConfig};
pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use policy::Policy;
pub use tensor::Tensor;
