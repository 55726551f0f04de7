//! Probabilistic class activation map (PCAM) pooling, the global pooling
//! operators it generalizes, and a weakly supervised localization pipeline
//! with its evaluation metrics.

pub mod backbone;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod head;
pub mod localization;
pub mod pgm;
pub mod pooling;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use head::{ClassifierHead, ProbabilityMap};
pub use localization::BBox;
pub use pooling::{PoolKind, PoolSpec};
pub use tensor::{Grid, Rng, Tensor};
pub use trainer::{Model, TrainConfig, TrainState};
