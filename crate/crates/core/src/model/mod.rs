//! The isotropic ClusterViG network: configs, weights, forward
//! composition, checkpointing, and a toy trainer.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;
pub mod train;

pub use checkpoint::{load_model, save_model, Checkpoint};
pub use config::{default_k_schedule, ModelConfig, StemConfig, KAPPA_MAX};
pub use forward::{
    ffn_forward, grapher_forward, head_forward, model_forward, model_forward_eval, stem_forward,
};
pub use params::{init_weights, ModelParams};
pub use train::{accuracy, toy_dataset, train_toy, AdamW};
