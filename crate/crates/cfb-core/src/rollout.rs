//! Batch-parallel rollout of independently parameterized quadcopter
//! instances.
//!
//! Instances are embarrassingly parallel; every random stream is keyed by
//! `(seed, label, instance id)`, so results do not depend on scheduling,
//! thread count or batch composition.

use crate::error::CoreError;
use crate::params::ModelParams;
use crate::rng::derive_rng;
use crate::sim::{observe, step, SimConfig, StateEstimate, StateRing};
use crate::state::{MotorCommand, QuadState};
use nalgebra::UnitQuaternion;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// One simulated quadcopter: its physical parameters, initial state and
/// fixed sensing offset. The `id` keys the instance's random streams.
#[derive(Debug, Clone)]
pub struct Instance {
    pub id: u64,
    pub params: ModelParams,
    pub init: QuadState,
    pub attitude_offset: UnitQuaternion<f64>,
}

impl Instance {
    pub fn nominal(id: u64, params: ModelParams, init: QuadState) -> Self {
        Instance {
            id,
            params,
            init,
            attitude_offset: UnitQuaternion::identity(),
        }
    }
}

/// Everything a controller may look at when queried for a command.
pub struct ControlCtx<'a> {
    /// Index of the instance within the batch.
    pub instance: usize,
    /// Instance id (stable under batch permutation).
    pub id: u64,
    /// Control step index, 0-based.
    pub step: usize,
    /// Simulated time at the query [s].
    pub time: f64,
    estimates: &'a [StateEstimate],
    actions: &'a [MotorCommand],
    /// Stream for stochastic controllers, keyed by the instance id.
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> ControlCtx<'a> {
    /// Estimate from `k` control steps ago (0 = the current one).
    pub fn estimate_back(&self, k: usize) -> &StateEstimate {
        &self.estimates[self.estimates.len() - 1 - k]
    }

    /// Action applied `k` control steps ago (1 = most recent).
    pub fn action_back(&self, k: usize) -> &MotorCommand {
        &self.actions[self.actions.len() - k]
    }

    /// Number of estimates available (history length + 1).
    pub fn estimate_count(&self) -> usize {
        self.estimates.len()
    }

    pub fn action_count(&self) -> usize {
        self.actions.len()
    }
}

/// A controller is any thread-safe function of the control context.
pub trait Controller: Sync {
    fn command(&self, ctx: &mut ControlCtx) -> MotorCommand;
}

impl<F> Controller for F
where
    F: Fn(&mut ControlCtx) -> MotorCommand + Sync,
{
    fn command(&self, ctx: &mut ControlCtx) -> MotorCommand {
        self(ctx)
    }
}

/// Rollout options beyond the simulation config.
#[derive(Debug, Clone)]
pub struct RolloutOptions {
    /// How many past control-step estimates/actions controllers may read.
    pub history: usize,
    /// Pre-fill value for the action history at episode start.
    pub action_prefill: MotorCommand,
    /// Record the state at every physics step (otherwise control steps only).
    pub record_physics_steps: bool,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions {
            history: 2,
            action_prefill: MotorCommand::uniform(0.5),
            record_physics_steps: true,
        }
    }
}

/// Why an instance stopped early.
#[derive(Debug, Clone)]
pub struct RolloutFailure {
    /// Control step at which the failure surfaced.
    pub step: usize,
    pub reason: String,
}

/// Recorded trajectory of one instance.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// States at every recorded physics step, starting with the initial one.
    pub states: Vec<QuadState>,
    /// What the controller saw at each control step.
    pub estimates: Vec<StateEstimate>,
    /// Commands applied at each control step.
    pub commands: Vec<MotorCommand>,
    /// Set when the instance aborted on a non-finite state.
    pub failure: Option<RolloutFailure>,
    /// Physics step period of `states` [s].
    pub dt_states: f64,
    /// Control period of `estimates`/`commands` [s].
    pub dt_control: f64,
}

/// Roll out one instance for `horizon` control steps.
pub fn rollout_instance<C: Controller + ?Sized>(
    index: usize,
    inst: &Instance,
    controller: &C,
    horizon: usize,
    cfg: &SimConfig,
    opts: &RolloutOptions,
) -> Trajectory {
    let substeps = cfg.control_substeps();
    let mut ring = StateRing::new(cfg.delay_steps(), inst.init);
    let mut physics_rng = derive_rng(cfg.seed, "physics", inst.id);
    let mut ctrl_rng = derive_rng(cfg.seed, "control", inst.id);

    // Pre-fill the estimate history with the initial reading so controllers
    // may look back `history` steps from the very first query.
    let mut estimates: Vec<StateEstimate> = Vec::with_capacity(opts.history + 2);
    if let Ok(initial_est) = observe(&ring, cfg, &inst.attitude_offset) {
        estimates.extend(std::iter::repeat(initial_est).take(opts.history));
    }
    let mut actions: Vec<MotorCommand> = vec![opts.action_prefill; opts.history];

    let mut traj = Trajectory {
        states: Vec::with_capacity(if opts.record_physics_steps {
            horizon * substeps + 1
        } else {
            horizon + 1
        }),
        estimates: Vec::with_capacity(horizon),
        commands: Vec::with_capacity(horizon),
        failure: None,
        dt_states: if opts.record_physics_steps {
            cfg.dt_physics
        } else {
            cfg.dt_control
        },
        dt_control: cfg.dt_control,
    };
    traj.states.push(inst.init);

    let mut state = inst.init;
    'control: for ctrl_step in 0..horizon {
        let est = match observe(&ring, cfg, &inst.attitude_offset) {
            Ok(est) => est,
            Err(e) => {
                traj.failure = Some(RolloutFailure {
                    step: ctrl_step,
                    reason: e.to_string(),
                });
                break 'control;
            }
        };
        estimates.push(est);
        if estimates.len() > opts.history + 1 {
            estimates.remove(0);
        }

        let mut ctx = ControlCtx {
            instance: index,
            id: inst.id,
            step: ctrl_step,
            time: ctrl_step as f64 * cfg.dt_control,
            estimates: &estimates,
            actions: &actions,
            rng: &mut ctrl_rng,
        };
        let u = controller.command(&mut ctx);
        traj.estimates.push(est);
        traj.commands.push(u);
        actions.push(u);
        if actions.len() > opts.history.max(1) {
            actions.remove(0);
        }

        for sub in 0..substeps {
            match step(&state, &u, &inst.params, cfg, &mut physics_rng) {
                Ok(next) => {
                    state = next;
                    ring.push(state);
                    if opts.record_physics_steps {
                        traj.states.push(state);
                    } else if sub == substeps - 1 {
                        traj.states.push(state);
                    }
                }
                Err(e) => {
                    traj.failure = Some(RolloutFailure {
                        step: ctrl_step,
                        reason: e.to_string(),
                    });
                    break 'control;
                }
            }
        }
    }
    traj
}

/// Roll out a batch of instances in parallel.
///
/// Results are ordered by instance index; per-instance failures are
/// recorded in the trajectory and do not abort the rest of the batch.
pub fn rollout_batch<C: Controller + ?Sized>(
    instances: &[Instance],
    controller: &C,
    horizon: usize,
    cfg: &SimConfig,
    opts: &RolloutOptions,
) -> Result<Vec<Trajectory>, CoreError> {
    cfg.validate()?;
    Ok(instances
        .par_iter()
        .enumerate()
        .map(|(index, inst)| rollout_instance(index, inst, controller, horizon, cfg, opts))
        .collect())
}

/// Controller that always applies the same command.
pub fn constant_controller(u: MotorCommand) -> impl Fn(&mut ControlCtx) -> MotorCommand {
    move |_ctx: &mut ControlCtx| u
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::hover_trim;
    use nalgebra::{Vector3, Vector4};

    fn hover_instance(id: u64) -> (Instance, MotorCommand) {
        let params = ModelParams::cfb_guards();
        let (omega, u) = hover_trim(&params).unwrap();
        let inst = Instance::nominal(
            id,
            params,
            QuadState::hovering_at(Vector3::new(0.0, 0.0, 1.0), omega),
        );
        (inst, MotorCommand::uniform(u))
    }

    #[test]
    fn identical_instances_identical_trajectories() {
        let (a, u) = hover_instance(3);
        let b = a.clone();
        let cfg = SimConfig::default();
        let trajs = rollout_batch(
            &[a, b],
            &constant_controller(u),
            25,
            &cfg,
            &RolloutOptions::default(),
        )
        .unwrap();
        assert_eq!(trajs[0].states.len(), trajs[1].states.len());
        for (x, y) in trajs[0].states.iter().zip(&trajs[1].states) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn permuting_instances_permutes_outputs() {
        let (mut a, u) = hover_instance(0);
        let (mut b, _) = hover_instance(1);
        a.init.p.x = 0.5;
        b.init.p.x = -0.5;
        let cfg = SimConfig::default();
        let opts = RolloutOptions::default();
        let fwd = rollout_batch(&[a.clone(), b.clone()], &constant_controller(u), 20, &cfg, &opts)
            .unwrap();
        let rev = rollout_batch(&[b, a], &constant_controller(u), 20, &cfg, &opts).unwrap();
        for (x, y) in fwd[0].states.iter().zip(&rev[1].states) {
            assert_eq!(x, y);
        }
        for (x, y) in fwd[1].states.iter().zip(&rev[0].states) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn zero_horizon_returns_initial_state_only() {
        let (a, u) = hover_instance(0);
        let trajs = rollout_batch(
            &[a],
            &constant_controller(u),
            0,
            &SimConfig::default(),
            &RolloutOptions::default(),
        )
        .unwrap();
        assert_eq!(trajs[0].states.len(), 1);
        assert!(trajs[0].commands.is_empty());
        assert!(trajs[0].failure.is_none());
    }

    #[test]
    fn batch_of_4096_short_horizon_completes() {
        let (base, u) = hover_instance(0);
        let instances: Vec<Instance> = (0..4096)
            .map(|i| Instance { id: i as u64, ..base.clone() })
            .collect();
        let cfg = SimConfig {
            dt_control: 0.004,
            ..SimConfig::default()
        };
        let trajs = rollout_batch(
            &instances,
            &constant_controller(u),
            50,
            &cfg,
            &RolloutOptions::default(),
        )
        .unwrap();
        assert_eq!(trajs.len(), 4096);
        assert!(trajs.iter().all(|t| t.failure.is_none()));
    }

    #[test]
    fn noiseless_rollouts_bitwise_reproducible() {
        let (mut a, _) = hover_instance(7);
        a.params.cog_offset = nalgebra::Vector2::new(0.001, -0.002);
        a.init.w = Vector3::new(0.4, -0.2, 0.1);
        a.init.omega = Vector4::new(1000.0, 1200.0, 900.0, 1100.0);
        let cfg = SimConfig::default().without_noise();
        let ctrl = |ctx: &mut ControlCtx| {
            // Feedback on the estimate exercises the observe path.
            let est = ctx.estimate_back(0);
            MotorCommand::uniform(0.5 + 0.02 * est.v.z)
        };
        let opts = RolloutOptions::default();
        let t1 = rollout_batch(&[a.clone()], &ctrl, 50, &cfg, &opts).unwrap();
        let t2 = rollout_batch(&[a], &ctrl, 50, &cfg, &opts).unwrap();
        for (x, y) in t1[0].states.iter().zip(&t2[0].states) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn non_finite_instance_failure_does_not_abort_batch() {
        let (good, u) = hover_instance(0);
        let mut bad = good.clone();
        bad.id = 1;
        bad.init.v.x = f64::INFINITY;
        let trajs = rollout_batch(
            &[bad, good],
            &constant_controller(u),
            10,
            &SimConfig::default(),
            &RolloutOptions::default(),
        )
        .unwrap();
        assert!(trajs[0].failure.is_some());
        assert!(trajs[1].failure.is_none());
        assert_eq!(trajs[1].commands.len(), 10);
    }
}
