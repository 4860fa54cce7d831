//! Machine-unlearning mechanisms for linear models and random forests,
//! together with evaluation measures and monitoring proxies.

mod codec;
pub mod d2d;
pub mod dare;
pub mod data;
pub mod deepobliviate;
pub mod deltagrad;
pub mod dfa;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod loss;
pub mod mechanism;
pub mod model;
pub mod params;
pub mod rng;
pub mod secondorder;
pub mod sisa;
pub mod synthetic;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use data::{DatasetTable, SampleId};
pub use error::{Result, UnlearnError};
pub use loss::{loss_gradient, loss_hessian, loss_value, LossKind, LossSpec};
pub use model::{Classifier, LinearModel};
pub use params::ParamVector;
pub use rng::RngStream;
pub use synthetic::{gaussian_blobs, train_test_split, BlobSpec};
pub use trainer::{
    naive_retrain, train_from, train_gd, train_noisy, BatchMode, Cost, Init, Schedule, TrainConfig,
    TrainHistory,
};
