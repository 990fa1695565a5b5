//! Discrete-time simulation: RK4 integration of the rigid body with the
//! motor speeds propagated exactly, per-step sensor noise, and delayed
//! state estimation.

use crate::config::KvMap;
use crate::error::CoreError;
use crate::model::rigid_derivative_raw;
use crate::params::ModelParams;
use crate::state::{MotorCommand, QuadState};
use nalgebra::{Quaternion, UnitQuaternion, Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;

/// Timing and sensing configuration of the simulation engine.
///
/// The control period and the estimate delay must both be integer
/// multiples of the physics step. Noise standard deviations are per
/// physics step; zero disables sampling entirely.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Physics integration step [s].
    pub dt_physics: f64,
    /// Controller period [s]; must be a multiple of `dt_physics`.
    pub dt_control: f64,
    /// Age of the state estimate handed to controllers [s].
    pub estimate_delay: f64,
    /// Std of the additive velocity noise per physics step [m/s].
    pub vel_noise_std: f64,
    /// Std of the additive body-rate noise per physics step [rad/s].
    pub rate_noise_std: f64,
    /// Root seed for all derived randomness.
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt_physics: 0.004,
            dt_control: 0.008,
            estimate_delay: 0.008,
            vel_noise_std: 0.001,
            rate_noise_std: 0.001,
            seed: 0,
        }
    }
}

fn integer_ratio(num: f64, den: f64) -> Option<usize> {
    let ratio = num / den;
    let rounded = ratio.round();
    if (ratio - rounded).abs() < 1e-6 && rounded >= 0.0 {
        Some(rounded as usize)
    } else {
        None
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.dt_physics > 0.0) {
            return Err(CoreError::InvalidConfig(format!(
                "dt_physics must be positive, got {}",
                self.dt_physics
            )));
        }
        if integer_ratio(self.dt_control, self.dt_physics)
            .filter(|&n| n >= 1)
            .is_none()
        {
            return Err(CoreError::InvalidConfig(format!(
                "dt_control ({}) must be a positive integer multiple of dt_physics ({})",
                self.dt_control, self.dt_physics
            )));
        }
        if integer_ratio(self.estimate_delay, self.dt_physics).is_none() {
            return Err(CoreError::InvalidConfig(format!(
                "estimate_delay ({}) must be an integer multiple of dt_physics ({})",
                self.estimate_delay, self.dt_physics
            )));
        }
        if self.vel_noise_std < 0.0 || self.rate_noise_std < 0.0 {
            return Err(CoreError::InvalidConfig("noise std must be >= 0".into()));
        }
        Ok(())
    }

    /// Physics steps per control period.
    pub fn control_substeps(&self) -> usize {
        integer_ratio(self.dt_control, self.dt_physics).unwrap_or(1).max(1)
    }

    /// Physics steps the state estimate lags behind.
    pub fn delay_steps(&self) -> usize {
        integer_ratio(self.estimate_delay, self.dt_physics).unwrap_or(0)
    }

    pub fn noise_enabled(&self) -> bool {
        self.vel_noise_std > 0.0 || self.rate_noise_std > 0.0
    }

    /// Copy with noise disabled.
    pub fn without_noise(&self) -> Self {
        SimConfig {
            vel_noise_std: 0.0,
            rate_noise_std: 0.0,
            ..self.clone()
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("dt_physics", self.dt_physics);
        kv.set("dt_control", self.dt_control);
        kv.set("estimate_delay", self.estimate_delay);
        kv.set("vel_noise_std", self.vel_noise_std);
        kv.set("rate_noise_std", self.rate_noise_std);
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self, CoreError> {
        kv.ensure_known(&[
            "dt_physics",
            "dt_control",
            "estimate_delay",
            "vel_noise_std",
            "rate_noise_std",
            "seed",
        ])?;
        let d = SimConfig::default();
        let cfg = SimConfig {
            dt_physics: kv.f64_or("dt_physics", d.dt_physics)?,
            dt_control: kv.f64_or("dt_control", d.dt_control)?,
            estimate_delay: kv.f64_or("estimate_delay", d.estimate_delay)?,
            vel_noise_std: kv.f64_or("vel_noise_std", d.vel_noise_std)?,
            rate_noise_std: kv.f64_or("rate_noise_std", d.rate_noise_std)?,
            seed: kv.u64_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Advance the full state by one physics step.
///
/// The rigid-body substate integrates with classical RK4; the motor speeds
/// follow their exact exponential solution, evaluated at the RK4 stage
/// times so the stage derivatives see the true motor trajectory. The
/// quaternion is renormalized afterwards and Gaussian noise is added to
/// `v` and `w` when enabled.
pub fn step<R: Rng + ?Sized>(
    x: &QuadState,
    u: &MotorCommand,
    params: &ModelParams,
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<QuadState, CoreError> {
    let dt = cfg.dt_physics;
    let target = u.as_vector() * params.motor_gain;
    let omega_at = |s: f64| target + (x.omega - target) * (-s / params.motor_tc).exp();
    let omega_half = omega_at(dt / 2.0);
    let omega_full = omega_at(dt);

    let eval = |p: &Vector3<f64>,
                v: &Vector3<f64>,
                q: &Quaternion<f64>,
                w: &Vector3<f64>,
                omega: &Vector4<f64>| {
        let _ = p;
        rigid_derivative_raw(v, q, w, omega, u, params)
    };

    let q0 = *x.q.quaternion();
    let k1 = eval(&x.p, &x.v, &q0, &x.w, &x.omega);

    let half = dt / 2.0;
    let p2 = x.p + k1.dp * half;
    let v2 = x.v + k1.dv * half;
    let q2 = q0 + k1.dq * half;
    let w2 = x.w + k1.dw * half;
    let k2 = eval(&p2, &v2, &q2, &w2, &omega_half);

    let p3 = x.p + k2.dp * half;
    let v3 = x.v + k2.dv * half;
    let q3 = q0 + k2.dq * half;
    let w3 = x.w + k2.dw * half;
    let k3 = eval(&p3, &v3, &q3, &w3, &omega_half);

    let p4 = x.p + k3.dp * dt;
    let v4 = x.v + k3.dv * dt;
    let q4 = q0 + k3.dq * dt;
    let w4 = x.w + k3.dw * dt;
    let k4 = eval(&p4, &v4, &q4, &w4, &omega_full);

    let sixth = dt / 6.0;
    let p = x.p + (k1.dp + k2.dp * 2.0 + k3.dp * 2.0 + k4.dp) * sixth;
    let mut v = x.v + (k1.dv + k2.dv * 2.0 + k3.dv * 2.0 + k4.dv) * sixth;
    let q_raw = q0 + (k1.dq + k2.dq * 2.0 + k3.dq * 2.0 + k4.dq) * sixth;
    let mut w = x.w + (k1.dw + k2.dw * 2.0 + k3.dw * 2.0 + k4.dw) * sixth;

    if cfg.vel_noise_std > 0.0 {
        v.x += cfg.vel_noise_std * rng.sample::<f64, _>(StandardNormal);
        v.y += cfg.vel_noise_std * rng.sample::<f64, _>(StandardNormal);
        v.z += cfg.vel_noise_std * rng.sample::<f64, _>(StandardNormal);
    }
    if cfg.rate_noise_std > 0.0 {
        w.x += cfg.rate_noise_std * rng.sample::<f64, _>(StandardNormal);
        w.y += cfg.rate_noise_std * rng.sample::<f64, _>(StandardNormal);
        w.z += cfg.rate_noise_std * rng.sample::<f64, _>(StandardNormal);
    }

    let next = QuadState {
        p,
        v,
        q: UnitQuaternion::from_quaternion(q_raw),
        w,
        omega: omega_full,
    };
    if !next.is_finite() {
        return Err(CoreError::non_finite("state after physics step"));
    }
    Ok(next)
}

/// What a controller sees: the true state from `estimate_delay` ago with
/// the attitude reading rotated by a fixed offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateEstimate {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
    pub w: Vector3<f64>,
}

impl StateEstimate {
    pub fn from_state(x: &QuadState) -> Self {
        StateEstimate {
            p: x.p,
            v: x.v,
            q: x.q,
            w: x.w,
        }
    }
}

/// Fixed-capacity ring of past states, newest last.
///
/// At episode start the ring is pre-filled with the initial state so the
/// delayed estimate is defined from the first control step onward.
#[derive(Debug, Clone)]
pub struct StateRing {
    buf: Vec<QuadState>,
    head: usize,
}

impl StateRing {
    /// Ring covering `delay_steps` of history, pre-filled with `initial`.
    pub fn new(delay_steps: usize, initial: QuadState) -> Self {
        StateRing {
            buf: vec![initial; delay_steps + 1],
            head: 0,
        }
    }

    /// Ring with given capacity but only one filled slot (no warm-up).
    pub fn unfilled(capacity: usize, initial: QuadState) -> Self {
        let mut ring = StateRing {
            buf: Vec::with_capacity(capacity.max(1)),
            head: 0,
        };
        ring.buf.push(initial);
        ring
    }

    pub fn push(&mut self, state: QuadState) {
        if self.buf.len() < self.buf.capacity() {
            self.buf.push(state);
            self.head = self.buf.len() - 1;
        } else {
            self.head = (self.head + 1) % self.buf.len();
            self.buf[self.head] = state;
        }
    }

    pub fn capacity(&self) -> usize {
        self.buf.capacity()
    }

    /// State `k` pushes ago (0 = newest).
    pub fn back(&self, k: usize) -> Result<&QuadState, CoreError> {
        if k >= self.buf.len() {
            return Err(CoreError::InsufficientHistory {
                needed: k + 1,
                available: self.buf.len(),
            });
        }
        let idx = (self.head + self.buf.len() - k) % self.buf.len();
        Ok(&self.buf[idx])
    }

    pub fn latest(&self) -> &QuadState {
        &self.buf[self.head]
    }
}

/// Delayed, attitude-offset state estimate.
///
/// The offset rotation is applied on the world side: the estimated
/// attitude is `offset * q` and the velocity is read in the offset world
/// frame, while position and the body-frame rates pass through unchanged.
pub fn observe(
    history: &StateRing,
    cfg: &SimConfig,
    attitude_offset: &UnitQuaternion<f64>,
) -> Result<StateEstimate, CoreError> {
    let delayed = history.back(cfg.delay_steps())?;
    Ok(StateEstimate {
        p: delayed.p,
        v: attitude_offset.transform_vector(&delayed.v),
        q: attitude_offset * delayed.q,
        w: delayed.w,
    })
}
