//! Core flight-dynamics stack for the Crazyflie Brushless (CFB).
//!
//! The crate covers the continuous-time rigid-body + first-order motor
//! model with its identified parameter presets, a discrete-time simulation
//! engine (RK4 rigid body, exact motor update, delayed/noisy sensing) with
//! batch-parallel rollouts, domain randomization of the physical
//! parameters, and the flat key-value config / flight-log CSV formats
//! shared by the command-line tools.

pub mod config;
pub mod error;
pub mod flightlog;
pub mod model;
pub mod params;
pub mod random;
pub mod rng;
pub mod rollout;
pub mod sim;
pub mod state;

pub use error::CoreError;
pub use flightlog::{FlightLog, LogRow};
pub use model::{
    body_torques, derivative, hover_trim, motor_step_exact, thrust_poly, torque_poly, Derivative,
};
pub use params::ModelParams;
pub use random::RandomizationSpec;
pub use rollout::{
    constant_controller, rollout_batch, ControlCtx, Controller, Instance, RolloutOptions,
    Trajectory,
};
pub use sim::{observe, step, SimConfig, StateEstimate, StateRing};
pub use state::{MotorCommand, QuadState};
