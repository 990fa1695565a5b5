//! Simulation state and motor-command types.

use nalgebra::{Quaternion, UnitQuaternion, Vector3, Vector4};

/// Full 17-dimensional simulation state.
///
/// Position and velocity live in the world frame (z up), the quaternion is
/// world-from-body with scalar-first layout `(w, x, y, z)`, angular velocity
/// is expressed in the body frame, and `omega` holds the four motor
/// rotation speeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadState {
    /// Position [m], world frame.
    pub p: Vector3<f64>,
    /// Linear velocity [m/s], world frame.
    pub v: Vector3<f64>,
    /// Attitude, world-from-body.
    pub q: UnitQuaternion<f64>,
    /// Angular velocity [rad/s], body frame.
    pub w: Vector3<f64>,
    /// Motor rotation speeds [rad/s].
    pub omega: Vector4<f64>,
}

impl QuadState {
    /// State at rest at the origin, level attitude, motors stopped.
    pub fn at_rest() -> Self {
        QuadState {
            p: Vector3::zeros(),
            v: Vector3::zeros(),
            q: UnitQuaternion::identity(),
            w: Vector3::zeros(),
            omega: Vector4::zeros(),
        }
    }

    /// At rest at `p` with all motors spinning at `omega`.
    pub fn hovering_at(p: Vector3<f64>, omega: f64) -> Self {
        QuadState {
            p,
            omega: Vector4::repeat(omega),
            ..QuadState::at_rest()
        }
    }

    /// True when every component of the state is finite.
    pub fn is_finite(&self) -> bool {
        self.p.iter().all(|x| x.is_finite())
            && self.v.iter().all(|x| x.is_finite())
            && self.q.coords.iter().all(|x| x.is_finite())
            && self.w.iter().all(|x| x.is_finite())
            && self.omega.iter().all(|x| x.is_finite())
    }

    /// Quaternion as scalar-first `(w, x, y, z)`.
    pub fn q_wxyz(&self) -> [f64; 4] {
        let q = self.q.quaternion();
        [q.w, q.i, q.j, q.k]
    }
}

/// Build a unit quaternion from scalar-first components, renormalizing.
pub fn quat_from_wxyz(w: f64, x: f64, y: f64, z: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
}

/// Four normalized motor commands, each clamped to [0, 1] at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotorCommand {
    u: Vector4<f64>,
}

fn clamp_unit(x: f64) -> f64 {
    // Non-finite inputs collapse to 0 so the [0,1] invariant always holds.
    if x.is_finite() {
        x.clamp(0.0, 1.0)
    } else {
        0.0
    }
}

impl MotorCommand {
    pub fn new(u: [f64; 4]) -> Self {
        MotorCommand {
            u: Vector4::from(u).map(clamp_unit),
        }
    }

    pub fn from_vector(u: Vector4<f64>) -> Self {
        MotorCommand {
            u: u.map(clamp_unit),
        }
    }

    /// The same command on all four motors.
    pub fn uniform(u: f64) -> Self {
        MotorCommand::new([u, u, u, u])
    }

    /// All motors off.
    pub fn zero() -> Self {
        MotorCommand::uniform(0.0)
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        self.u
    }

    pub fn get(&self, motor: usize) -> f64 {
        self.u[motor]
    }
}

impl std::ops::Index<usize> for MotorCommand {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.u[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn motor_command_clamps_at_construction() {
        let u = MotorCommand::new([-0.5, 0.3, 1.7, f64::NAN]);
        assert_eq!(u[0], 0.0);
        assert_eq!(u[1], 0.3);
        assert_eq!(u[2], 1.0);
        assert_eq!(u[3], 0.0);
    }

    #[test]
    fn quaternion_scalar_first_layout() {
        let q = quat_from_wxyz(1.0, 0.0, 0.0, 0.0);
        assert_eq!(q.quaternion().w, 1.0);
        let s = QuadState::at_rest();
        assert_eq!(s.q_wxyz(), [1.0, 0.0, 0.0, 0.0]);
    }
}
