//! Meta-continual learning as sequence prediction: attention and selective
//! state-space sequence models trained over synthetic continual-learning
//! episodes.

pub mod autodiff;
pub mod episodes;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod optim;
pub mod rng;
pub mod selectivity;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
