//! Scenarios, lockstep episodes and evaluation metrics.

pub mod episode;
pub mod metrics;
pub mod scenario;

pub use episode::{
    detect_collision, detect_deadlock, run_episode, step_snapshot, ControlDecision, Controller, EpisodeError,
    HoldController, TrajectoryLog,
};
pub use metrics::{compute_metrics, desired_paths, summarize, Metrics, Summary};
pub use scenario::{
    build_scenario, jittered, perturbation_suite, Perturbation, ScenarioKind, ScenarioSpec, SUITE_HORIZON, SUITE_SIZE,
};
