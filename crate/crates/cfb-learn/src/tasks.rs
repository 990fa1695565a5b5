//! Flight tasks: observation construction, reward functions, failure
//! detection and the episode loop binding them to the simulation engine.

use crate::error::LearnError;
use cfb_core::config::KvMap;
use cfb_core::model::{arm_columns, hover_trim};
use cfb_core::random::{sample, RandomizationSpec};
use cfb_core::sim::{observe, step, SimConfig, StateEstimate, StateRing};
use cfb_core::state::{MotorCommand, QuadState};
use cfb_core::ModelParams;
use nalgebra::{DVector, UnitQuaternion, UnitVector3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use std::collections::VecDeque;

/// Triangular reward kernel: `relu(1 - |e / e_max|)`.
pub fn triangle(e: f64, e_max: f64) -> f64 {
    (1.0 - (e / e_max).abs()).max(0.0)
}

/// Why an episode failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureCause {
    /// Velocity above 10 m/s.
    Overspeed,
    /// Body rates above 30 rad/s.
    Overrate,
    /// Crashed into the ground plane (z < 0).
    Ground,
}

impl FailureCause {
    pub fn name(&self) -> &'static str {
        match self {
            FailureCause::Overspeed => "overspeed",
            FailureCause::Overrate => "overrate",
            FailureCause::Ground => "ground",
        }
    }
}

pub const FAIL_SPEED: f64 = 10.0;
pub const FAIL_RATE: f64 = 30.0;
pub const FAIL_PENALTY: f64 = 300.0;

/// Failure condition shared by both tasks.
pub fn failure_of(x: &QuadState) -> Option<FailureCause> {
    if x.v.norm() > FAIL_SPEED {
        Some(FailureCause::Overspeed)
    } else if x.w.norm() > FAIL_RATE {
        Some(FailureCause::Overrate)
    } else if x.p.z < 0.0 {
        Some(FailureCause::Ground)
    } else {
        None
    }
}

/// Position-hold reward: sums of triangular kernels on the position error,
/// velocity, attitude distance, body rates and the command-torque proxy,
/// minus a large penalty on failure.
///
/// Maximum value 1.37 at a perfect hover with equal commands.
pub fn reward_target(
    x: &QuadState,
    u: &MotorCommand,
    target: &Vector3<f64>,
    params: &ModelParams,
    canonicalize_q: bool,
) -> f64 {
    let q = x.q.quaternion();
    let qw_sign = if canonicalize_q && q.w < 0.0 { -1.0 } else { 1.0 };
    let q_dist = ((qw_sign * q.w - 1.0).powi(2)
        + (qw_sign * q.i).powi(2)
        + (qw_sign * q.j).powi(2)
        + (qw_sign * q.k).powi(2))
    .sqrt();

    let arms = arm_columns(params);
    let mut lu_x = 0.0;
    let mut lu_y = 0.0;
    for i in 0..4 {
        lu_x += arms[i].x * u[i];
        lu_y += arms[i].y * u[i];
    }
    let lu = (lu_x * lu_x + lu_y * lu_y).sqrt();

    let fail = if failure_of(x).is_some() { 1.0 } else { 0.0 };
    triangle((x.p - target).norm(), 10.0)
        + 0.05 * triangle(x.v.norm(), 10.0)
        + 0.15 * triangle(q_dist, 2.0)
        + 0.15 * triangle(x.w.norm(), 10.0)
        + 0.02 * triangle(lu, 0.01)
        - FAIL_PENALTY * fail
}

/// Flip reward: body-frame velocity tracking, attitude term on the body
/// x-axis, and roll-rate tracking toward the commanded setpoint.
///
/// Maximum value 1.75 at the joint optimum.
pub fn reward_flip(
    x: &QuadState,
    v_target: f64,
    rollrate_target: f64,
    e_rate_max: f64,
) -> f64 {
    let r = x.q.to_rotation_matrix();
    let body_vel = r.transpose() * x.v;
    let vel_err = (body_vel - Vector3::new(0.0, 0.0, v_target)).norm();
    let body_x = r * Vector3::x();
    let axis_err = (body_x - Vector3::new(0.0, 1.0, 0.0)).norm();
    let rate_err = (x.w - Vector3::new(rollrate_target, 0.0, 0.0)).norm();
    let fail = if failure_of(x).is_some() { 1.0 } else { 0.0 };
    0.6 * triangle(vel_err, 20.0)
        + 0.15 * triangle(axis_err, 3.0)
        + 1.0 * triangle(rate_err, e_rate_max)
        - FAIL_PENALTY * fail
}

/// Which reward/observation the episode runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Target,
    Flip,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Target => "target",
            TaskKind::Flip => "flip",
        }
    }

    pub fn parse(s: &str) -> Result<Self, LearnError> {
        match s {
            "target" => Ok(TaskKind::Target),
            "flip" => Ok(TaskKind::Flip),
            other => Err(LearnError::InvalidConfig(format!(
                "unknown task {other:?} (expected target|flip)"
            ))),
        }
    }
}

/// Task definition: observation layout, reward configuration, episode
/// horizon and initial-state distribution.
#[derive(Debug, Clone)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Number of past frames H in the observation.
    pub history: usize,
    /// Episode horizon [s].
    pub horizon: f64,
    /// World target / launch reference.
    pub target: Vector3<f64>,
    /// Rate-error scale of the flip reward's tracking term [rad/s].
    pub e_rate_max: f64,
    /// Map q and -q to the same attitude-reward value.
    pub canonicalize_q: bool,
    /// Fixed observation scaling.
    pub pos_scale: f64,
    pub vel_scale: f64,
    pub rate_scale: f64,
    /// Target task: init position uniform in a cube of this half-width [m].
    pub init_half_cube: f64,
    /// Init attitude perturbation bound [deg].
    pub init_tilt_deg: f64,
    /// Flip task: initial climb-rate range [m/s].
    pub flip_vz_range: (f64, f64),
    /// Flip task: roll-rate setpoint range [rad/s].
    pub flip_rate_range: (f64, f64),
    /// Flip task: body-z velocity setpoint range [m/s].
    pub flip_vtarget_range: (f64, f64),
    /// Flip task: initial altitude above the reference [m].
    pub flip_alt_range: (f64, f64),
    /// Action-history prefill value at episode start.
    pub action_prefill: f64,
}

impl TaskConfig {
    pub fn target_task() -> Self {
        TaskConfig {
            kind: TaskKind::Target,
            history: 2,
            horizon: 10.0,
            target: Vector3::new(0.0, 0.0, 1.5),
            e_rate_max: 10.0,
            canonicalize_q: false,
            pos_scale: 0.3,
            vel_scale: 0.2,
            rate_scale: 0.1,
            init_half_cube: 1.0,
            init_tilt_deg: 10.0,
            flip_vz_range: (2.0, 4.0),
            flip_rate_range: (12.0, 20.0),
            flip_vtarget_range: (1.0, 4.0),
            flip_alt_range: (1.0, 2.0),
            action_prefill: 0.5,
        }
    }

    pub fn flip_task() -> Self {
        TaskConfig {
            kind: TaskKind::Flip,
            horizon: 0.9,
            ..TaskConfig::target_task()
        }
    }

    pub fn for_kind(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Target => Self::target_task(),
            TaskKind::Flip => Self::flip_task(),
        }
    }

    /// Observation dimension: 13 (H+1) + 4 H, plus 2 setpoints for flips.
    pub fn obs_dim(&self) -> usize {
        observation_dim(self.kind, self.history)
    }

    pub fn horizon_steps(&self, sim: &SimConfig) -> usize {
        (self.horizon / sim.dt_control).round() as usize
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        if !(self.e_rate_max > 0.0) {
            return Err(LearnError::InvalidConfig("e_rate_max must be > 0".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(LearnError::InvalidConfig("horizon must be > 0".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("name", self.kind.name());
        kv.set("history", self.history);
        kv.set("horizon", self.horizon);
        kv.set("target_x", self.target.x);
        kv.set("target_y", self.target.y);
        kv.set("target_z", self.target.z);
        kv.set("e_rate_max", self.e_rate_max);
        kv.set("canonicalize_q", self.canonicalize_q);
        kv.set("pos_scale", self.pos_scale);
        kv.set("vel_scale", self.vel_scale);
        kv.set("rate_scale", self.rate_scale);
        kv.set("init_half_cube", self.init_half_cube);
        kv.set("init_tilt_deg", self.init_tilt_deg);
        kv.set("flip_vz_lo", self.flip_vz_range.0);
        kv.set("flip_vz_hi", self.flip_vz_range.1);
        kv.set("flip_rate_lo", self.flip_rate_range.0);
        kv.set("flip_rate_hi", self.flip_rate_range.1);
        kv.set("flip_vtarget_lo", self.flip_vtarget_range.0);
        kv.set("flip_vtarget_hi", self.flip_vtarget_range.1);
        kv.set("flip_alt_lo", self.flip_alt_range.0);
        kv.set("flip_alt_hi", self.flip_alt_range.1);
        kv.set("action_prefill", self.action_prefill);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self, LearnError> {
        kv.ensure_known(&[
            "name",
            "history",
            "horizon",
            "target_x",
            "target_y",
            "target_z",
            "e_rate_max",
            "canonicalize_q",
            "pos_scale",
            "vel_scale",
            "rate_scale",
            "init_half_cube",
            "init_tilt_deg",
            "flip_vz_lo",
            "flip_vz_hi",
            "flip_rate_lo",
            "flip_rate_hi",
            "flip_vtarget_lo",
            "flip_vtarget_hi",
            "flip_alt_lo",
            "flip_alt_hi",
            "action_prefill",
        ])
        .map_err(LearnError::Core)?;
        let kind = TaskKind::parse(&kv.string_or("name", "target"))?;
        let base = TaskConfig::for_kind(kind);
        let cfg = TaskConfig {
            kind,
            history: kv.usize_or("history", base.history)?,
            horizon: kv.f64_or("horizon", base.horizon)?,
            target: Vector3::new(
                kv.f64_or("target_x", base.target.x)?,
                kv.f64_or("target_y", base.target.y)?,
                kv.f64_or("target_z", base.target.z)?,
            ),
            e_rate_max: kv.f64_or("e_rate_max", base.e_rate_max)?,
            canonicalize_q: kv.bool_or("canonicalize_q", base.canonicalize_q)?,
            pos_scale: kv.f64_or("pos_scale", base.pos_scale)?,
            vel_scale: kv.f64_or("vel_scale", base.vel_scale)?,
            rate_scale: kv.f64_or("rate_scale", base.rate_scale)?,
            init_half_cube: kv.f64_or("init_half_cube", base.init_half_cube)?,
            init_tilt_deg: kv.f64_or("init_tilt_deg", base.init_tilt_deg)?,
            flip_vz_range: (
                kv.f64_or("flip_vz_lo", base.flip_vz_range.0)?,
                kv.f64_or("flip_vz_hi", base.flip_vz_range.1)?,
            ),
            flip_rate_range: (
                kv.f64_or("flip_rate_lo", base.flip_rate_range.0)?,
                kv.f64_or("flip_rate_hi", base.flip_rate_range.1)?,
            ),
            flip_vtarget_range: (
                kv.f64_or("flip_vtarget_lo", base.flip_vtarget_range.0)?,
                kv.f64_or("flip_vtarget_hi", base.flip_vtarget_range.1)?,
            ),
            flip_alt_range: (
                kv.f64_or("flip_alt_lo", base.flip_alt_range.0)?,
                kv.f64_or("flip_alt_hi", base.flip_alt_range.1)?,
            ),
            action_prefill: kv.f64_or("action_prefill", base.action_prefill)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Observation dimension for a task kind and history length.
pub fn observation_dim(kind: TaskKind, history: usize) -> usize {
    let base = 13 * (history + 1) + 4 * history;
    match kind {
        TaskKind::Target => base,
        TaskKind::Flip => base + 2,
    }
}

/// Build the policy observation from estimate/action history.
///
/// Layout: frames newest first (current + H past), each frame
/// `[pos_err*s_p, vel*s_v, q wxyz, rates*s_w]`, then the H most recent
/// actions (newest first, mapped to [-1, 1]), then optional setpoints.
pub fn build_observation<'a>(
    task: &TaskConfig,
    target: &Vector3<f64>,
    setpoints: Option<(f64, f64)>,
    est_back: impl Fn(usize) -> &'a StateEstimate,
    act_back: impl Fn(usize) -> MotorCommand,
) -> DVector<f64> {
    let h = task.history;
    let mut obs = Vec::with_capacity(observation_dim(task.kind, h));
    for k in 0..=h {
        let est = est_back(k);
        let err = est.p - target;
        obs.push(err.x * task.pos_scale);
        obs.push(err.y * task.pos_scale);
        obs.push(err.z * task.pos_scale);
        obs.push(est.v.x * task.vel_scale);
        obs.push(est.v.y * task.vel_scale);
        obs.push(est.v.z * task.vel_scale);
        let q = est.q.quaternion();
        obs.push(q.w);
        obs.push(q.i);
        obs.push(q.j);
        obs.push(q.k);
        obs.push(est.w.x * task.rate_scale);
        obs.push(est.w.y * task.rate_scale);
        obs.push(est.w.z * task.rate_scale);
    }
    for k in 1..=h {
        let u = act_back(k);
        for i in 0..4 {
            obs.push(2.0 * u[i] - 1.0);
        }
    }
    if task.kind == TaskKind::Flip {
        let (v_target, rollrate) = setpoints.unwrap_or((0.0, 0.0));
        obs.push(v_target * task.vel_scale);
        obs.push(rollrate * task.rate_scale);
    }
    DVector::from_vec(obs)
}

/// Terminal/failure status of an episode step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOutcome {
    pub terminal: bool,
    pub failure: Option<FailureCause>,
}

impl EpisodeOutcome {
    pub fn running() -> Self {
        EpisodeOutcome {
            terminal: false,
            failure: None,
        }
    }
}

/// Result of advancing the episode one control step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub obs: DVector<f64>,
    pub reward: f64,
    pub outcome: EpisodeOutcome,
}

/// A single training/evaluation episode owning its randomized instance.
#[derive(Debug, Clone)]
pub struct Episode {
    pub task: TaskConfig,
    pub sim: SimConfig,
    nominal: ModelParams,
    dr: RandomizationSpec,
    pub params: ModelParams,
    pub attitude_offset: UnitQuaternion<f64>,
    state: QuadState,
    ring: StateRing,
    est_hist: VecDeque<StateEstimate>,
    act_hist: VecDeque<MotorCommand>,
    setpoints: Option<(f64, f64)>,
    step_idx: usize,
    horizon_steps: usize,
    terminal: bool,
    rng: ChaCha8Rng,
}

impl Episode {
    /// Create an episode and draw its first randomized instance.
    pub fn new(
        task: TaskConfig,
        sim: SimConfig,
        nominal: ModelParams,
        dr: RandomizationSpec,
        rng: ChaCha8Rng,
    ) -> Result<Self, LearnError> {
        task.validate()?;
        sim.validate().map_err(LearnError::Core)?;
        dr.validate().map_err(LearnError::Core)?;
        let horizon_steps = task.horizon_steps(&sim);
        let mut ep = Episode {
            task,
            sim,
            params: nominal.clone(),
            nominal,
            dr,
            attitude_offset: UnitQuaternion::identity(),
            state: QuadState::at_rest(),
            ring: StateRing::new(0, QuadState::at_rest()),
            est_hist: VecDeque::new(),
            act_hist: VecDeque::new(),
            setpoints: None,
            step_idx: 0,
            horizon_steps,
            terminal: true,
            rng,
        };
        ep.reset()?;
        Ok(ep)
    }

    /// Draw a fresh randomized instance and initial state.
    pub fn reset(&mut self) -> Result<(), LearnError> {
        let (params, offset) = sample(&self.nominal, &self.dr, &mut self.rng);
        self.params = params;
        self.attitude_offset = offset;

        let init = match self.task.kind {
            TaskKind::Target => self.draw_target_init()?,
            TaskKind::Flip => self.draw_flip_init()?,
        };
        self.state = init;
        self.ring = StateRing::new(self.sim.delay_steps(), init);
        let first_est = observe(&self.ring, &self.sim, &self.attitude_offset)
            .map_err(LearnError::Core)?;
        self.est_hist = VecDeque::with_capacity(self.task.history + 1);
        for _ in 0..=self.task.history {
            self.est_hist.push_back(first_est);
        }
        self.act_hist = VecDeque::with_capacity(self.task.history.max(1));
        for _ in 0..self.task.history.max(1) {
            self.act_hist
                .push_back(MotorCommand::uniform(self.task.action_prefill));
        }
        self.step_idx = 0;
        self.terminal = false;
        Ok(())
    }

    fn random_tilt(&mut self, max_deg: f64) -> UnitQuaternion<f64> {
        if max_deg <= 0.0 {
            return UnitQuaternion::identity();
        }
        let axis: [f64; 3] = rand_distr::UnitSphere.sample(&mut self.rng);
        let angle = self.rng.gen_range(0.0..=max_deg.to_radians());
        UnitQuaternion::from_axis_angle(
            &UnitVector3::new_normalize(Vector3::new(axis[0], axis[1], axis[2])),
            angle,
        )
    }

    fn draw_target_init(&mut self) -> Result<QuadState, LearnError> {
        let hc = self.task.init_half_cube;
        let offset = Vector3::new(
            self.rng.gen_range(-hc..=hc),
            self.rng.gen_range(-hc..=hc),
            self.rng.gen_range(-hc..=hc),
        );
        let tilt = self.random_tilt(self.task.init_tilt_deg);
        let (omega_star, _) = hover_trim(&self.params).map_err(LearnError::Core)?;
        let mut init = QuadState::hovering_at(self.task.target + offset, omega_star);
        init.q = tilt;
        // Keep starts above the ground plane.
        init.p.z = init.p.z.max(0.2);
        self.setpoints = None;
        Ok(init)
    }

    fn draw_flip_init(&mut self) -> Result<QuadState, LearnError> {
        let alt = self
            .rng
            .gen_range(self.task.flip_alt_range.0..=self.task.flip_alt_range.1);
        let vz = self
            .rng
            .gen_range(self.task.flip_vz_range.0..=self.task.flip_vz_range.1);
        let rate = self
            .rng
            .gen_range(self.task.flip_rate_range.0..=self.task.flip_rate_range.1);
        let v_target = self
            .rng
            .gen_range(self.task.flip_vtarget_range.0..=self.task.flip_vtarget_range.1);
        let u0 = self.rng.gen_range(0.5..=0.9);
        let tilt = self.random_tilt(5.0);
        let mut init = QuadState::hovering_at(
            self.task.target + Vector3::new(0.0, 0.0, alt),
            u0 * self.params.motor_gain,
        );
        init.v = Vector3::new(0.0, 0.0, vz);
        init.q = tilt;
        self.setpoints = Some((v_target, rate));
        Ok(init)
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn state(&self) -> &QuadState {
        &self.state
    }

    pub fn setpoints(&self) -> Option<(f64, f64)> {
        self.setpoints
    }

    pub fn time(&self) -> f64 {
        self.step_idx as f64 * self.sim.dt_control
    }

    pub fn obs_dim(&self) -> usize {
        self.task.obs_dim()
    }

    /// Current policy observation.
    pub fn observation(&self) -> DVector<f64> {
        let est = &self.est_hist;
        let act = &self.act_hist;
        build_observation(
            &self.task,
            &self.task.target,
            self.setpoints,
            |k| &est[est.len() - 1 - k],
            |k| act[act.len() - k],
        )
    }

    /// Advance one control period with the given command.
    pub fn step(&mut self, u: MotorCommand) -> Result<StepResult, LearnError> {
        if self.terminal {
            return Err(LearnError::TerminalEpisode);
        }
        for _ in 0..self.sim.control_substeps() {
            let next = step(&self.state, &u, &self.params, &self.sim, &mut self.rng)
                .map_err(|e| LearnError::Numerical(e.to_string()))?;
            self.state = next;
            self.ring.push(next);
        }
        let est = observe(&self.ring, &self.sim, &self.attitude_offset)
            .map_err(LearnError::Core)?;
        self.est_hist.pop_front();
        self.est_hist.push_back(est);
        self.act_hist.pop_front();
        self.act_hist.push_back(u);
        self.step_idx += 1;

        let failure = failure_of(&self.state);
        let reward = match self.task.kind {
            TaskKind::Target => reward_target(
                &self.state,
                &u,
                &self.task.target,
                &self.params,
                self.task.canonicalize_q,
            ),
            TaskKind::Flip => {
                let (v_target, rate) = self.setpoints.unwrap_or((0.0, 0.0));
                reward_flip(&self.state, v_target, rate, self.task.e_rate_max)
            }
        };
        let terminal = failure.is_some() || self.step_idx >= self.horizon_steps;
        self.terminal = terminal;
        Ok(StepResult {
            obs: self.observation(),
            reward,
            outcome: EpisodeOutcome { terminal, failure },
        })
    }

    /// True when the episode ended by horizon rather than failure.
    pub fn truncated(&self) -> bool {
        self.terminal && self.step_idx >= self.horizon_steps
    }
}
