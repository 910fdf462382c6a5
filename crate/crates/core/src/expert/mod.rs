//! MPC-CBF expert: the receding-horizon baseline and the demonstration
//! source for training.

pub mod dataset;
pub mod mpc;

pub use dataset::{
    generate_dataset, read_dataset, run_expert_episode, tune_expert, write_dataset, DatasetConfig, DatasetError,
    ExpertDataset, ExpertDatasetManifest,
};
pub use mpc::{mpc_plan, MpcConfig, MpcController, MpcError, MpcPlan};
