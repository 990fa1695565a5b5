//! Continuous-time quadcopter dynamics: thrust/torque curves, exact
//! first-order motor update, body torques and the full state derivative.
//!
//! Motor index order follows the moment-arm matrix columns; spin signs are
//! `(-1, +1, -1, +1)`.

use crate::error::CoreError;
use crate::params::ModelParams;
use crate::state::{MotorCommand, QuadState};
use nalgebra::{Quaternion, Vector2, Vector3, Vector4};

/// Motor spin directions; paired signs make steady yaw torque cancel.
pub const SPIN_SIGNS: [f64; 4] = [-1.0, 1.0, -1.0, 1.0];

/// Evaluate `a3 x^3 + a2 x^2 + a1 x` with coefficients ordered (a3, a2, a1).
pub fn eval_cubic(coeffs: [f64; 3], x: f64) -> f64 {
    ((coeffs[0] * x + coeffs[1]) * x + coeffs[2]) * x
}

/// Moment-arm columns of the mixing matrix, one xy pair per motor [m].
pub fn arm_columns(params: &ModelParams) -> [Vector2<f64>; 4] {
    let h = params.width / 2.0;
    [
        Vector2::new(-h, -h),
        Vector2::new(-h, h),
        Vector2::new(h, h),
        Vector2::new(h, -h),
    ]
}

/// Thrust of one motor at rotation speed `omega` [rad/s] -> [N].
///
/// Cubic in the normalized speed, clamped at zero (the identified
/// polynomial dips slightly negative at very low speed) and scaled by the
/// motor's thrust scale factor.
pub fn thrust_poly(omega: f64, motor: usize, params: &ModelParams) -> f64 {
    let x = omega / params.sigma;
    (eval_cubic(params.thrust_coeffs, x) * params.thrust_scale[motor]).max(0.0)
}

/// Friction/aero torque magnitude of one motor at speed `omega` -> [N m].
pub fn torque_poly(omega: f64, motor: usize, params: &ModelParams) -> f64 {
    let x = omega / params.sigma;
    (eval_cubic(params.torque_coeffs, x) * params.torque_scale[motor]).max(0.0)
}

/// Per-motor thrusts for a motor-speed vector.
pub fn thrust_forces(omega: &Vector4<f64>, params: &ModelParams) -> Vector4<f64> {
    Vector4::new(
        thrust_poly(omega[0], 0, params),
        thrust_poly(omega[1], 1, params),
        thrust_poly(omega[2], 2, params),
        thrust_poly(omega[3], 3, params),
    )
}

/// Exact update of the first-order motor dynamics over `dt`:
/// `omega' = K u + (omega - K u) exp(-dt / T)`, elementwise.
pub fn motor_step_exact(
    omega: &Vector4<f64>,
    u: &MotorCommand,
    dt: f64,
    params: &ModelParams,
) -> Vector4<f64> {
    let target = u.as_vector() * params.motor_gain;
    let decay = (-dt / params.motor_tc).exp();
    target + (omega - target) * decay
}

/// Motor accelerations from the first-order model: `(K u - omega) / T`.
pub fn motor_accel(omega: &Vector4<f64>, u: &MotorCommand, params: &ModelParams) -> Vector4<f64> {
    (u.as_vector() * params.motor_gain - omega) / params.motor_tc
}

/// Body-frame torque vector from motor thrusts and reactive torques.
///
/// Roll/pitch come from the thrusts times the moment arms (columns of the
/// mixing matrix shifted by the center-of-gravity offset); yaw is the
/// signed sum of the motor inertia torque `Jm * d(omega)/dt` and the
/// friction/aero torque. The motor acceleration is the algebraic value of
/// the first-order model, never a numerical difference.
pub fn body_torques(
    omega: &Vector4<f64>,
    u: &MotorCommand,
    params: &ModelParams,
) -> Vector3<f64> {
    let forces = thrust_forces(omega, params);
    let arms = arm_columns(params);
    let accel = motor_accel(omega, u, params);

    let mut tau = Vector3::zeros();
    for i in 0..4 {
        let arm = arms[i] - params.cog_offset;
        tau.x += arm.x * forces[i];
        tau.y += arm.y * forces[i];
        tau.z += SPIN_SIGNS[i]
            * (params.motor_inertia * accel[i] + torque_poly(omega[i], i, params));
    }
    tau
}

/// Rigid-body part of the state derivative (everything but the motors).
#[derive(Debug, Clone, Copy)]
pub struct RigidDerivative {
    pub dp: Vector3<f64>,
    pub dv: Vector3<f64>,
    pub dq: Quaternion<f64>,
    pub dw: Vector3<f64>,
}

/// Full 17-dimensional state derivative.
#[derive(Debug, Clone, Copy)]
pub struct Derivative {
    pub dp: Vector3<f64>,
    pub dv: Vector3<f64>,
    /// Quaternion rate, scalar-first semantics (not unit length).
    pub dq: Quaternion<f64>,
    pub dw: Vector3<f64>,
    pub domega: Vector4<f64>,
}

/// Rigid-body derivative for given motor speeds (used by the integrator,
/// which propagates the motor speeds exactly between stages).
///
/// `q` may be slightly non-unit (an RK4 stage value); the thrust direction
/// is computed from its normalization while the quaternion rate uses the
/// raw value, so the integrated ODE stays smooth and norm-preserving.
pub fn rigid_derivative_raw(
    v: &Vector3<f64>,
    q: &Quaternion<f64>,
    w: &Vector3<f64>,
    omega: &Vector4<f64>,
    u: &MotorCommand,
    params: &ModelParams,
) -> RigidDerivative {
    let thrust_total: f64 = thrust_forces(omega, params).sum();
    let unit_q = nalgebra::UnitQuaternion::from_quaternion(*q);
    let body_z = unit_q.transform_vector(&Vector3::z());
    let dv = body_z * (thrust_total / params.mass) - Vector3::new(0.0, 0.0, params.gravity);

    // q_dot = 1/2 q ⊗ (0, w), Hamilton product, scalar-first.
    let omega_quat = Quaternion::new(0.0, w.x, w.y, w.z);
    let dq = (q * omega_quat) * 0.5;

    let tau = body_torques(omega, u, params);
    let j = params.inertia;
    let jw = Vector3::new(j.x * w.x, j.y * w.y, j.z * w.z);
    let coriolis = w.cross(&jw);
    let dw = Vector3::new(
        (tau.x - coriolis.x) / j.x,
        (tau.y - coriolis.y) / j.y,
        (tau.z - coriolis.z) / j.z,
    );

    RigidDerivative { dp: *v, dv, dq, dw }
}

/// Rigid-body derivative at a unit attitude quaternion.
pub fn rigid_derivative(
    v: &Vector3<f64>,
    q: &nalgebra::UnitQuaternion<f64>,
    w: &Vector3<f64>,
    omega: &Vector4<f64>,
    u: &MotorCommand,
    params: &ModelParams,
) -> RigidDerivative {
    rigid_derivative_raw(v, q.quaternion(), w, omega, u, params)
}

/// Full state derivative of the model.
///
/// Pure and deterministic; rejects non-finite state components.
pub fn derivative(
    x: &QuadState,
    u: &MotorCommand,
    params: &ModelParams,
) -> Result<Derivative, CoreError> {
    if !x.is_finite() {
        return Err(CoreError::non_finite("state passed to derivative"));
    }
    let rigid = rigid_derivative(&x.v, &x.q, &x.w, &x.omega, u, params);
    Ok(Derivative {
        dp: rigid.dp,
        dv: rigid.dv,
        dq: rigid.dq,
        dw: rigid.dw,
        domega: motor_accel(&x.omega, u, params),
    })
}

/// Solve for the hover trim: the motor speed and command at which total
/// thrust exactly balances weight.
///
/// Returns `(omega_star [rad/s], u_star)`. Uses the mean thrust scale, so
/// a uniform command is exact for identical motors. Errors when the
/// required per-motor thrust exceeds the curve's value at the maximum
/// reachable speed `omega = K`.
pub fn hover_trim(params: &ModelParams) -> Result<(f64, f64), CoreError> {
    let per_motor = params.mass * params.gravity / 4.0;
    let mean_scale = params.thrust_scale.iter().sum::<f64>() / 4.0;
    let x_max = params.motor_gain / params.sigma;
    let curve = |x: f64| (eval_cubic(params.thrust_coeffs, x) * mean_scale).max(0.0);
    let max_thrust = curve(x_max);
    if per_motor > max_thrust {
        return Err(CoreError::InfeasibleTrim {
            required: per_motor,
            max: max_thrust,
        });
    }
    let (mut lo, mut hi) = (0.0_f64, x_max);
    // Bisection to well below the 1e-9 N tolerance on the thrust balance.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if curve(mid) < per_motor {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let x_star = 0.5 * (lo + hi);
    let omega_star = x_star * params.sigma;
    Ok((omega_star, omega_star / params.motor_gain))
}
