//! Physical parameters of the quadcopter model and the built-in presets.

use crate::config::KvMap;
use crate::error::CoreError;
use nalgebra::{Vector2, Vector3};
use std::path::Path;

/// All physical parameters of the dynamics model, SI units throughout.
///
/// The thrust and torque curves are cubic polynomials in the normalized
/// motor speed `x = omega / sigma` with coefficients ordered `(a3, a2, a1)`
/// and zero intercept. `thrust_scale` / `torque_scale` are per-motor
/// multiplicative factors (1.0 nominal) used by domain randomization.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Mass [kg].
    pub mass: f64,
    /// Diagonal of the moment-of-inertia tensor [kg m^2].
    pub inertia: Vector3<f64>,
    /// Motor time constant [s].
    pub motor_tc: f64,
    /// Motor amplification factor [rad/s]; steady-state speed at u = 1.
    pub motor_gain: f64,
    /// Motor moment of inertia [kg m^2].
    pub motor_inertia: f64,
    /// Quadcopter width [m]; moment arms are width / 2.
    pub width: f64,
    /// Gravity [m/s^2].
    pub gravity: f64,
    /// Speed normalization constant [rad/s] for the thrust/torque curves.
    pub sigma: f64,
    /// Thrust curve coefficients (a3, a2, a1) [N].
    pub thrust_coeffs: [f64; 3],
    /// Friction/aero torque curve coefficients (a3, a2, a1) [N m].
    pub torque_coeffs: [f64; 3],
    /// Center-of-gravity offset in the body xy-plane [m].
    pub cog_offset: Vector2<f64>,
    /// Per-motor thrust scale factors (unitless).
    pub thrust_scale: [f64; 4],
    /// Per-motor torque scale factors (unitless).
    pub torque_scale: [f64; 4],
}

impl ModelParams {
    /// Identified parameters for the CFB with propeller guards.
    pub fn cfb_guards() -> Self {
        ModelParams {
            mass: 0.044,
            inertia: Vector3::new(3.3e-5, 3.6e-5, 5.9e-5),
            ..ModelParams::common()
        }
    }

    /// Identified parameters for the CFB without propeller guards.
    pub fn cfb_noguards() -> Self {
        ModelParams {
            mass: 0.040,
            inertia: Vector3::new(1.8e-5, 2.4e-5, 3.0e-5),
            ..ModelParams::common()
        }
    }

    fn common() -> Self {
        ModelParams {
            mass: 0.044,
            inertia: Vector3::new(3.3e-5, 3.6e-5, 5.9e-5),
            motor_tc: 0.05,
            motor_gain: 2.9e3,
            motor_inertia: 0.5e-7,
            width: 0.0707,
            gravity: 9.81,
            sigma: 2.9e3,
            thrust_coeffs: [-0.23, 0.562, -0.043],
            torque_coeffs: [-3.4e-4, 8.7e-4, 2.9e-4],
            cog_offset: Vector2::zeros(),
            thrust_scale: [1.0; 4],
            torque_scale: [1.0; 4],
        }
    }

    /// Look up a built-in preset by name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "cfb-guards" => Some(Self::cfb_guards()),
            "cfb-noguards" => Some(Self::cfb_noguards()),
            _ => None,
        }
    }

    /// Names of all built-in presets.
    pub fn preset_names() -> &'static [&'static str] {
        &["cfb-guards", "cfb-noguards"]
    }

    /// Check the positivity constraints on the parameter set.
    pub fn validate(&self) -> Result<(), CoreError> {
        let positive: [(&str, f64); 8] = [
            ("m", self.mass),
            ("jxx", self.inertia.x),
            ("jyy", self.inertia.y),
            ("jzz", self.inertia.z),
            ("motor_tc", self.motor_tc),
            ("motor_gain", self.motor_gain),
            ("sigma", self.sigma),
            ("width", self.width),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(CoreError::InvalidParam(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        for i in 0..4 {
            if !(self.thrust_scale[i] > 0.0) || !(self.torque_scale[i] > 0.0) {
                return Err(CoreError::InvalidParam(format!(
                    "thrust/torque scale of motor {} must be positive",
                    i + 1
                )));
            }
        }
        if !self.cog_offset.iter().all(|x| x.is_finite()) {
            return Err(CoreError::InvalidParam("cog offset must be finite".into()));
        }
        Ok(())
    }

    /// Serialize to the flat `key = value` parameter format.
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("m", self.mass);
        kv.set("jxx", self.inertia.x);
        kv.set("jyy", self.inertia.y);
        kv.set("jzz", self.inertia.z);
        kv.set("motor_tc", self.motor_tc);
        kv.set("motor_gain", self.motor_gain);
        kv.set("motor_inertia", self.motor_inertia);
        kv.set("width", self.width);
        kv.set("gravity", self.gravity);
        kv.set("sigma", self.sigma);
        kv.set("thrust_a3", self.thrust_coeffs[0]);
        kv.set("thrust_a2", self.thrust_coeffs[1]);
        kv.set("thrust_a1", self.thrust_coeffs[2]);
        kv.set("torque_a3", self.torque_coeffs[0]);
        kv.set("torque_a2", self.torque_coeffs[1]);
        kv.set("torque_a1", self.torque_coeffs[2]);
        kv.set("cog_x", self.cog_offset.x);
        kv.set("cog_y", self.cog_offset.y);
        for i in 0..4 {
            kv.set(&format!("thrust_scale_{}", i + 1), self.thrust_scale[i]);
        }
        for i in 0..4 {
            kv.set(&format!("torque_scale_{}", i + 1), self.torque_scale[i]);
        }
        kv
    }

    /// Parse from the flat parameter format. Missing keys fall back to the
    /// guards preset; unknown keys are rejected.
    pub fn from_kv(kv: &KvMap) -> Result<Self, CoreError> {
        const KNOWN: &[&str] = &[
            "m",
            "jxx",
            "jyy",
            "jzz",
            "motor_tc",
            "motor_gain",
            "motor_inertia",
            "width",
            "gravity",
            "sigma",
            "thrust_a3",
            "thrust_a2",
            "thrust_a1",
            "torque_a3",
            "torque_a2",
            "torque_a1",
            "cog_x",
            "cog_y",
            "thrust_scale_1",
            "thrust_scale_2",
            "thrust_scale_3",
            "thrust_scale_4",
            "torque_scale_1",
            "torque_scale_2",
            "torque_scale_3",
            "torque_scale_4",
        ];
        kv.ensure_known(KNOWN)?;
        let base = ModelParams::cfb_guards();
        let mut p = ModelParams {
            mass: kv.f64_or("m", base.mass)?,
            inertia: Vector3::new(
                kv.f64_or("jxx", base.inertia.x)?,
                kv.f64_or("jyy", base.inertia.y)?,
                kv.f64_or("jzz", base.inertia.z)?,
            ),
            motor_tc: kv.f64_or("motor_tc", base.motor_tc)?,
            motor_gain: kv.f64_or("motor_gain", base.motor_gain)?,
            motor_inertia: kv.f64_or("motor_inertia", base.motor_inertia)?,
            width: kv.f64_or("width", base.width)?,
            gravity: kv.f64_or("gravity", base.gravity)?,
            sigma: kv.f64_or("sigma", base.sigma)?,
            thrust_coeffs: [
                kv.f64_or("thrust_a3", base.thrust_coeffs[0])?,
                kv.f64_or("thrust_a2", base.thrust_coeffs[1])?,
                kv.f64_or("thrust_a1", base.thrust_coeffs[2])?,
            ],
            torque_coeffs: [
                kv.f64_or("torque_a3", base.torque_coeffs[0])?,
                kv.f64_or("torque_a2", base.torque_coeffs[1])?,
                kv.f64_or("torque_a1", base.torque_coeffs[2])?,
            ],
            cog_offset: Vector2::new(kv.f64_or("cog_x", 0.0)?, kv.f64_or("cog_y", 0.0)?),
            thrust_scale: [1.0; 4],
            torque_scale: [1.0; 4],
        };
        for i in 0..4 {
            p.thrust_scale[i] = kv.f64_or(&format!("thrust_scale_{}", i + 1), 1.0)?;
            p.torque_scale[i] = kv.f64_or(&format!("torque_scale_{}", i + 1), 1.0)?;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        let mut kv = self.to_kv();
        kv.set_header("quadcopter model parameters, SI units");
        kv.save(path)
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        Self::from_kv(&KvMap::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_identified_values() {
        let g = ModelParams::cfb_guards();
        assert_eq!(g.mass, 0.044);
        assert_eq!(g.inertia, Vector3::new(3.3e-5, 3.6e-5, 5.9e-5));
        assert_eq!(g.motor_tc, 0.05);
        assert_eq!(g.motor_gain, 2900.0);
        assert_eq!(g.motor_inertia, 5.0e-8);
        assert_eq!(g.width, 0.0707);

        let n = ModelParams::cfb_noguards();
        assert_eq!(n.mass, 0.040);
        assert_eq!(n.inertia, Vector3::new(1.8e-5, 2.4e-5, 3.0e-5));
    }

    #[test]
    fn kv_round_trip_is_exact() {
        let mut p = ModelParams::cfb_noguards();
        p.cog_offset = Vector2::new(0.002, -0.001);
        p.thrust_scale = [1.01, 0.99, 1.02, 0.98];
        let back = ModelParams::from_kv(&p.to_kv()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut kv = ModelParams::cfb_guards().to_kv();
        kv.set("not_a_param", 1.0);
        assert!(ModelParams::from_kv(&kv).is_err());
    }

    #[test]
    fn validation_rejects_nonpositive_mass() {
        let mut p = ModelParams::cfb_guards();
        p.mass = 0.0;
        assert!(p.validate().is_err());
    }
}
