//! Controllers binding trained policies to the batch rollout engine, and
//! the multi-phase flip schedule.

use crate::error::LearnError;
use crate::policy::{ForwardMode, Policy};
use crate::tasks::{build_observation, TaskConfig, TaskKind};
use cfb_core::config::KvMap;
use cfb_core::rollout::ControlCtx;
use cfb_core::state::MotorCommand;
use nalgebra::Vector3;

/// A policy driving the rollout engine toward a fixed target.
///
/// The observation is built from the control context's estimate/action
/// history with the same layout the policy was trained on.
pub fn policy_controller<'a>(
    policy: &'a Policy,
    task: &'a TaskConfig,
    target: Vector3<f64>,
    setpoints: Option<(f64, f64)>,
    mode: ForwardMode,
) -> impl Fn(&mut ControlCtx) -> MotorCommand + 'a {
    move |ctx: &mut ControlCtx| {
        let obs = build_observation(
            task,
            &target,
            setpoints,
            |k| ctx.estimate_back(k),
            |k| *ctx.action_back(k),
        );
        match policy.act(&obs, mode, ctx.rng) {
            Ok(sample) => sample.u,
            // Dimension mismatches surface immediately in tests; a rollout
            // controller has no error channel, so fall back to motors off.
            Err(_) => MotorCommand::zero(),
        }
    }
}

/// Phase boundaries and setpoints of a flip maneuver.
///
/// The stabilizer flies toward a point `liftoff_height` above the start
/// until `t_liftoff`, the flip policy runs until `t_flip_end`, then the
/// stabilizer recovers toward the start position until `t_recover_end`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlipPlan {
    pub t_liftoff: f64,
    pub t_flip_end: f64,
    pub t_recover_end: f64,
    pub liftoff_height: f64,
    /// Body-z velocity setpoint during the flip [m/s].
    pub v_target: f64,
    /// Roll-rate setpoint during the flip [rad/s].
    pub rollrate_target: f64,
}

impl Default for FlipPlan {
    fn default() -> Self {
        FlipPlan {
            t_liftoff: 0.48,
            t_flip_end: 0.48 + 0.72,
            t_recover_end: 0.48 + 0.72 + 3.0,
            liftoff_height: 1.6,
            v_target: 3.0,
            rollrate_target: 1000.0_f64.to_radians(),
        }
    }
}

impl FlipPlan {
    pub fn validate(&self) -> Result<(), LearnError> {
        let ts = [self.t_liftoff, self.t_flip_end, self.t_recover_end];
        if ts.iter().any(|t| !t.is_finite()) {
            return Err(LearnError::InvalidConfig("flip plan times must be finite".into()));
        }
        if !(self.t_liftoff > 0.0) {
            return Err(LearnError::InvalidConfig("t_liftoff must be > 0".into()));
        }
        if self.t_flip_end < self.t_liftoff {
            return Err(LearnError::InvalidConfig(
                "flip phase must not end before it starts".into(),
            ));
        }
        if self.t_recover_end < self.t_flip_end {
            return Err(LearnError::InvalidConfig(
                "recovery must not end before the flip phase".into(),
            ));
        }
        Ok(())
    }

    /// Duration of the flip window [s].
    pub fn flip_window(&self) -> f64 {
        self.t_flip_end - self.t_liftoff
    }

    /// Commanded total rotation over the flip window [rad].
    pub fn commanded_rotation(&self) -> f64 {
        self.flip_window() * self.rollrate_target
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("t_liftoff", self.t_liftoff);
        kv.set("t_flip_end", self.t_flip_end);
        kv.set("t_recover_end", self.t_recover_end);
        kv.set("liftoff_height", self.liftoff_height);
        kv.set("v_target", self.v_target);
        kv.set("rollrate_target_deg", self.rollrate_target.to_degrees());
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self, LearnError> {
        kv.ensure_known(&[
            "t_liftoff",
            "t_flip_end",
            "t_recover_end",
            "liftoff_height",
            "v_target",
            "rollrate_target_deg",
        ])
        .map_err(LearnError::Core)?;
        let d = FlipPlan::default();
        let plan = FlipPlan {
            t_liftoff: kv.f64_or("t_liftoff", d.t_liftoff)?,
            t_flip_end: kv.f64_or("t_flip_end", d.t_flip_end)?,
            t_recover_end: kv.f64_or("t_recover_end", d.t_recover_end)?,
            liftoff_height: kv.f64_or("liftoff_height", d.liftoff_height)?,
            v_target: kv.f64_or("v_target", d.v_target)?,
            rollrate_target: kv
                .f64_or("rollrate_target_deg", d.rollrate_target.to_degrees())?
                .to_radians(),
        };
        plan.validate()?;
        Ok(plan)
    }
}

/// Phase of the flip schedule at a given control step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipPhase {
    Liftoff,
    Flip,
    Recovery,
}

/// Phase lookup with switches at control-step boundaries.
pub fn flip_phase(plan: &FlipPlan, step: usize, dt_control: f64) -> FlipPhase {
    let liftoff_steps = (plan.t_liftoff / dt_control).round() as usize;
    let flip_end_steps = (plan.t_flip_end / dt_control).round() as usize;
    if step < liftoff_steps {
        FlipPhase::Liftoff
    } else if step < flip_end_steps {
        FlipPhase::Flip
    } else {
        FlipPhase::Recovery
    }
}

/// Composite controller running the multi-phase flip maneuver.
///
/// `start` is the launch reference: the stabilizer targets
/// `start + liftoff_height * e_z` during liftoff and `start` during
/// recovery; the flip policy's observation is referenced to `start`.
pub fn flip_schedule<'a>(
    plan: &'a FlipPlan,
    stabilizer: &'a Policy,
    stabilizer_task: &'a TaskConfig,
    flipper: &'a Policy,
    flip_task: &'a TaskConfig,
    start: Vector3<f64>,
    dt_control: f64,
) -> Result<impl Fn(&mut ControlCtx) -> MotorCommand + 'a, LearnError> {
    plan.validate()?;
    if stabilizer_task.kind != TaskKind::Target || flip_task.kind != TaskKind::Flip {
        return Err(LearnError::InvalidConfig(
            "flip schedule needs a target-task stabilizer and a flip-task policy".into(),
        ));
    }
    if stabilizer.obs_dim() != stabilizer_task.obs_dim() {
        return Err(LearnError::DimMismatch {
            what: "stabilizer observation".into(),
            expected: stabilizer_task.obs_dim(),
            got: stabilizer.obs_dim(),
        });
    }
    if flipper.obs_dim() != flip_task.obs_dim() {
        return Err(LearnError::DimMismatch {
            what: "flip-policy observation".into(),
            expected: flip_task.obs_dim(),
            got: flipper.obs_dim(),
        });
    }
    let above = start + Vector3::new(0.0, 0.0, plan.liftoff_height);
    Ok(move |ctx: &mut ControlCtx| {
        let (policy, task, target, setpoints) = match flip_phase(plan, ctx.step, dt_control) {
            FlipPhase::Liftoff => (stabilizer, stabilizer_task, above, None),
            FlipPhase::Flip => (
                flipper,
                flip_task,
                start,
                Some((plan.v_target, plan.rollrate_target)),
            ),
            FlipPhase::Recovery => (stabilizer, stabilizer_task, start, None),
        };
        let obs = build_observation(
            task,
            &target,
            setpoints,
            |k| ctx.estimate_back(k),
            |k| *ctx.action_back(k),
        );
        match policy.act(&obs, ForwardMode::Deterministic, ctx.rng) {
            Ok(sample) => sample.u,
            Err(_) => MotorCommand::zero(),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use cfb_core::model::hover_trim;
    use cfb_core::rng::derive_rng;
    use cfb_core::rollout::{rollout_batch, Instance, RolloutOptions};
    use cfb_core::sim::SimConfig;
    use cfb_core::state::QuadState;
    use cfb_core::ModelParams;

    fn setup() -> (Policy, TaskConfig, Policy, TaskConfig) {
        let stab_task = TaskConfig::target_task();
        let flip_task = TaskConfig::flip_task();
        let stab = Policy::init(stab_task.obs_dim(), &mut derive_rng(1, "s", 0));
        let flip = Policy::init(flip_task.obs_dim(), &mut derive_rng(2, "f", 0));
        (stab, stab_task, flip, flip_task)
    }

    #[test]
    fn plan_validation_rejects_non_monotone_times() {
        let mut plan = FlipPlan::default();
        plan.t_flip_end = plan.t_liftoff - 0.1;
        assert!(plan.validate().is_err());
        let mut plan = FlipPlan::default();
        plan.t_liftoff = 0.0;
        assert!(plan.validate().is_err());
        let mut plan = FlipPlan::default();
        plan.t_recover_end = plan.t_flip_end - 0.5;
        assert!(plan.validate().is_err());
    }

    #[test]
    fn commanded_rotation_example() {
        let plan = FlipPlan {
            t_liftoff: 0.5,
            t_flip_end: 0.5 + 0.72,
            rollrate_target: 1000.0_f64.to_radians(),
            ..FlipPlan::default()
        };
        let deg = plan.commanded_rotation().to_degrees();
        approx::assert_abs_diff_eq!(deg, 720.0, epsilon = 1e-9);
    }

    #[test]
    fn phase_switches_at_control_boundaries() {
        let plan = FlipPlan {
            t_liftoff: 0.48,
            t_flip_end: 1.2,
            t_recover_end: 4.0,
            ..FlipPlan::default()
        };
        let dt = 0.008;
        assert_eq!(flip_phase(&plan, 0, dt), FlipPhase::Liftoff);
        assert_eq!(flip_phase(&plan, 59, dt), FlipPhase::Liftoff);
        assert_eq!(flip_phase(&plan, 60, dt), FlipPhase::Flip);
        assert_eq!(flip_phase(&plan, 149, dt), FlipPhase::Flip);
        assert_eq!(flip_phase(&plan, 150, dt), FlipPhase::Recovery);
    }

    #[test]
    fn zero_length_flip_window_equals_stabilizer_only_flight() {
        let (stab, stab_task, flip, flip_task) = setup();
        let params = ModelParams::cfb_guards();
        let (omega, _) = hover_trim(&params).unwrap();
        let start = Vector3::new(0.0, 0.0, 1.5);
        let init = QuadState::hovering_at(start, omega);
        let cfg = SimConfig::default().without_noise();
        let opts = RolloutOptions::default();

        let plan = FlipPlan {
            t_liftoff: 0.4,
            t_flip_end: 0.4,
            t_recover_end: 2.0,
            ..FlipPlan::default()
        };
        let schedule = flip_schedule(
            &plan, &stab, &stab_task, &flip, &flip_task, start, cfg.dt_control,
        )
        .unwrap();
        let with_window = rollout_batch(
            &[Instance::nominal(0, params.clone(), init)],
            &schedule,
            100,
            &cfg,
            &opts,
        )
        .unwrap();

        // Manual two-phase stabilizer controller.
        let above = start + Vector3::new(0.0, 0.0, plan.liftoff_height);
        let liftoff_steps = (plan.t_liftoff / cfg.dt_control).round() as usize;
        let manual = |ctx: &mut cfb_core::rollout::ControlCtx| {
            let target = if ctx.step < liftoff_steps { above } else { start };
            let obs = build_observation(
                &stab_task,
                &target,
                None,
                |k| ctx.estimate_back(k),
                |k| *ctx.action_back(k),
            );
            stab.act(&obs, ForwardMode::Deterministic, ctx.rng).unwrap().u
        };
        let reference = rollout_batch(
            &[Instance::nominal(0, params, init)],
            &manual,
            100,
            &cfg,
            &opts,
        )
        .unwrap();
        for (a, b) in with_window[0].states.iter().zip(&reference[0].states) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn differing_rollrate_setpoints_change_flip_phase_commands() {
        let (stab, stab_task, flip, flip_task) = setup();
        let params = ModelParams::cfb_guards();
        let (omega, _) = hover_trim(&params).unwrap();
        let start = Vector3::new(0.0, 0.0, 1.5);
        let init = QuadState::hovering_at(start, omega);
        let cfg = SimConfig::default().without_noise();

        let run = |rate_deg: f64| {
            let plan = FlipPlan {
                rollrate_target: rate_deg.to_radians(),
                ..FlipPlan::default()
            };
            let schedule = flip_schedule(
                &plan, &stab, &stab_task, &flip, &flip_task, start, cfg.dt_control,
            )
            .unwrap();
            rollout_batch(
                &[Instance::nominal(0, params.clone(), init)],
                &schedule,
                120,
                &cfg,
                &RolloutOptions::default(),
            )
            .unwrap()
        };
        let a = run(1000.0);
        let b = run(600.0);
        assert_ne!(a[0].commands, b[0].commands);
    }

    #[test]
    fn plan_kv_round_trip() {
        let plan = FlipPlan {
            rollrate_target: 800.0_f64.to_radians(),
            ..FlipPlan::default()
        };
        let back = FlipPlan::from_kv(&plan.to_kv()).unwrap();
        approx::assert_relative_eq!(back.rollrate_target, plan.rollrate_target, epsilon = 1e-12);
        assert_eq!(back.t_liftoff, plan.t_liftoff);
    }
}
