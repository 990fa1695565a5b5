//! Learning stack for the CFB simulator: the MLP controller, flight-task
//! environments (position hold and backflips), and a from-scratch PPO
//! trainer with manual backpropagation.

pub mod control;
pub mod error;
pub mod policy;
pub mod ppo;
pub mod tasks;

pub use control::{flip_schedule, policy_controller, FlipPhase, FlipPlan};
pub use error::LearnError;
pub use policy::{ActionSample, ForwardMode, Policy};
pub use ppo::{compute_gae, ppo_update, train, Adam, Boundary, PpoConfig, RolloutBatch, TrainLog};
pub use tasks::{
    build_observation, failure_of, reward_flip, reward_target, triangle, Episode, EpisodeOutcome,
    FailureCause, StepResult, TaskConfig, TaskKind,
};
