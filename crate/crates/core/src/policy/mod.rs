//! LiveNet: an MLP that predicts a reference control and the barrier
//! penalties, followed by the CBF-QP projection.

pub mod checkpoint;
pub mod controller;
pub mod encoding;
pub mod network;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use controller::{controller_step, local_view, ControllerConfig, LiveNetController, StepOutput};
pub use encoding::{encode_observation, EncodingConfig, ModelInput};
pub use network::{forward, NetworkOutput, NetworkParams, NetworkShape};
pub use train::{loss, train, TrainConfig, TrainError, TrainOutcome, TrainingSample};
