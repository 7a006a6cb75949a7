//! Residual-network lottery tickets at block granularity: build CIFAR ResNets,
//! score blocks at a checkpoint, drop the least important ones, retrain the
//! shallower network from rewound weights, and account for its cost.

pub mod criteria;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod pruning;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
