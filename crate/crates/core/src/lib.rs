//! Workbench for the gradient-unification test-time defense: a small
//! trainable classifier, the defense itself, five score-based query
//! attacks, and an evaluation harness with seeded, reproducible reports.

pub mod attack;
pub mod data;
pub mod defense;
pub mod error;
pub mod harness;
pub mod model;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod unig;

pub use data::{gen_synthetic_dataset, load_idx_dataset, Dataset};
pub use defense::{logit_diff, DefenseKind, Oracle, QueryOracle};
pub use error::{Error, Result};
pub use model::{
    load_model, save_model, train_classifier, ArchConfig, ArchKind, ClassifierModel, TrainConfig,
};
pub use ops::Norm;
pub use rng::RngStream;
pub use tensor::Tensor;
pub use unig::{unig_forward, UniGConfig, UniGOutput, UniGState};
