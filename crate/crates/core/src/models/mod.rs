//! Sequence-model families and their building blocks.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod mamba;
pub mod model;
pub mod moe;
pub mod params;
pub mod ssm;
pub mod state;

pub use checkpoint::Checkpoint;
pub use config::{Family, ModelConfig, MoeConfig};
pub use model::{Forward, Model, RunLog, RunOutput, Token};
pub use params::ParamStore;
pub use ssm::Discretization;
pub use state::{LayerState, StreamingState};
