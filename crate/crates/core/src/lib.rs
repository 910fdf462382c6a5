//! Safe and live multi-robot navigation through doorways and intersections.
//!
//! The crate is organized bottom-up:
//!
//! * [`dynamics`]: unicycle model and Euler integrator;
//! * [`cbf`]: obstacle and liveness barrier rows over the control input;
//! * [`qpdiff`]: the per-cycle QP projection and its backward pass;
//! * [`policy`]: the penalty-predicting network, the controller step and training;
//! * [`expert`]: the receding-horizon MPC expert used for data and as a baseline;
//! * [`sim`]: scenarios, lockstep episodes and evaluation metrics.

pub mod cbf;
pub mod dynamics;
pub mod expert;
pub mod policy;
pub mod qpdiff;
pub mod sim;
pub mod world;

pub use cbf::{ConstraintRow, PenaltyValues, RowKind};
pub use dynamics::{AgentState, ControlInput, KinodynamicLimits};
pub use qpdiff::{QpProblem, QpResult, QpStatus};
pub use world::{Circle, Route, Vec2, WorldSnapshot};
