//! Domain randomization: sampling perturbed model parameters and fixed
//! attitude-measurement offsets.
//!
//! All quantities are drawn uniformly from symmetric intervals whose width
//! scales with the `magnitude` factor (0 = exactly nominal, 1 = the full
//! configured intervals).

use crate::config::KvMap;
use crate::error::CoreError;
use crate::params::ModelParams;
use nalgebra::{UnitQuaternion, UnitVector3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, UnitSphere};

/// Interval widths for every randomized quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomizationSpec {
    /// Mass interval, ± fraction of nominal.
    pub mass_frac: f64,
    /// Inertia interval, ± fraction per axis.
    pub inertia_frac: f64,
    /// Motor time-constant and gain interval, ± fraction each.
    pub motor_dyn_frac: f64,
    /// Per-motor thrust scale interval, ± fraction.
    pub thrust_scale_frac: f64,
    /// Per-motor torque scale interval, ± fraction.
    pub torque_scale_frac: f64,
    /// Center-of-gravity shift: uniform in a disc of this radius [m].
    pub cog_radius: f64,
    /// Attitude-offset angle interval [deg], axis uniform on the sphere.
    pub attitude_offset_deg: f64,
    /// Scale factor applied to every interval.
    pub magnitude: f64,
}

impl RandomizationSpec {
    /// Training intervals: mass ±10%, inertia and motor dynamics ±20%,
    /// thrust/torque scales ±20%, CoG within 1 cm, attitude offset ±15°.
    pub fn train() -> Self {
        RandomizationSpec {
            mass_frac: 0.10,
            inertia_frac: 0.20,
            motor_dyn_frac: 0.20,
            thrust_scale_frac: 0.20,
            torque_scale_frac: 0.20,
            cog_radius: 0.01,
            attitude_offset_deg: 15.0,
            magnitude: 1.0,
        }
    }

    /// Replay-evaluation intervals: ±2% on parameters, 2 mm CoG, no
    /// attitude offset. Mass is included; set `mass_frac` to 0 to perturb
    /// only inertia and the motor curves.
    pub fn replay() -> Self {
        RandomizationSpec {
            mass_frac: 0.02,
            inertia_frac: 0.02,
            motor_dyn_frac: 0.02,
            thrust_scale_frac: 0.02,
            torque_scale_frac: 0.02,
            cog_radius: 0.002,
            attitude_offset_deg: 0.0,
            magnitude: 1.0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "train" => Some(Self::train()),
            "replay" => Some(Self::replay()),
            _ => None,
        }
    }

    /// Copy with a different magnitude.
    pub fn with_magnitude(&self, magnitude: f64) -> Self {
        RandomizationSpec {
            magnitude,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let fields = [
            ("mass_frac", self.mass_frac),
            ("inertia_frac", self.inertia_frac),
            ("motor_dyn_frac", self.motor_dyn_frac),
            ("thrust_scale_frac", self.thrust_scale_frac),
            ("torque_scale_frac", self.torque_scale_frac),
            ("cog_radius", self.cog_radius),
            ("attitude_offset_deg", self.attitude_offset_deg),
            ("magnitude", self.magnitude),
        ];
        for (name, v) in fields {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(CoreError::InvalidParam(format!(
                    "randomization {name} must be >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("mass_frac", self.mass_frac);
        kv.set("inertia_frac", self.inertia_frac);
        kv.set("motor_dyn_frac", self.motor_dyn_frac);
        kv.set("thrust_scale_frac", self.thrust_scale_frac);
        kv.set("torque_scale_frac", self.torque_scale_frac);
        kv.set("cog_radius", self.cog_radius);
        kv.set("attitude_offset_deg", self.attitude_offset_deg);
        kv.set("magnitude", self.magnitude);
        kv
    }

    /// Parse from key-value form on top of a base spec (usually a preset).
    pub fn from_kv(kv: &KvMap, base: &RandomizationSpec) -> Result<Self, CoreError> {
        kv.ensure_known(&[
            "mass_frac",
            "inertia_frac",
            "motor_dyn_frac",
            "thrust_scale_frac",
            "torque_scale_frac",
            "cog_radius",
            "attitude_offset_deg",
            "magnitude",
        ])?;
        let spec = RandomizationSpec {
            mass_frac: kv.f64_or("mass_frac", base.mass_frac)?,
            inertia_frac: kv.f64_or("inertia_frac", base.inertia_frac)?,
            motor_dyn_frac: kv.f64_or("motor_dyn_frac", base.motor_dyn_frac)?,
            thrust_scale_frac: kv.f64_or("thrust_scale_frac", base.thrust_scale_frac)?,
            torque_scale_frac: kv.f64_or("torque_scale_frac", base.torque_scale_frac)?,
            cog_radius: kv.f64_or("cog_radius", base.cog_radius)?,
            attitude_offset_deg: kv.f64_or("attitude_offset_deg", base.attitude_offset_deg)?,
            magnitude: kv.f64_or("magnitude", base.magnitude)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn uniform_pm<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> f64 {
    if half_width == 0.0 {
        0.0
    } else {
        rng.gen_range(-half_width..=half_width)
    }
}

/// Draw a perturbed parameter set and attitude offset.
///
/// Zero magnitude returns the nominal parameters and an identity offset
/// without consuming randomness.
pub fn sample<R: Rng + ?Sized>(
    nominal: &ModelParams,
    spec: &RandomizationSpec,
    rng: &mut R,
) -> (ModelParams, UnitQuaternion<f64>) {
    if spec.magnitude == 0.0 {
        return (nominal.clone(), UnitQuaternion::identity());
    }
    let m = spec.magnitude;
    let mut p = nominal.clone();

    p.mass *= 1.0 + uniform_pm(rng, spec.mass_frac * m);
    p.inertia.x *= 1.0 + uniform_pm(rng, spec.inertia_frac * m);
    p.inertia.y *= 1.0 + uniform_pm(rng, spec.inertia_frac * m);
    p.inertia.z *= 1.0 + uniform_pm(rng, spec.inertia_frac * m);
    p.motor_tc *= 1.0 + uniform_pm(rng, spec.motor_dyn_frac * m);
    p.motor_gain *= 1.0 + uniform_pm(rng, spec.motor_dyn_frac * m);
    for i in 0..4 {
        p.thrust_scale[i] *= 1.0 + uniform_pm(rng, spec.thrust_scale_frac * m);
    }
    for i in 0..4 {
        p.torque_scale[i] *= 1.0 + uniform_pm(rng, spec.torque_scale_frac * m);
    }

    let radius = spec.cog_radius * m;
    if radius > 0.0 {
        // Uniform over the disc area.
        let r = radius * rng.gen_range(0.0..=1.0_f64).sqrt();
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        p.cog_offset.x += r * theta.cos();
        p.cog_offset.y += r * theta.sin();
    }

    let max_angle = (spec.attitude_offset_deg * m).to_radians();
    let offset = if max_angle > 0.0 {
        let axis: [f64; 3] = UnitSphere.sample(rng);
        let angle = uniform_pm(rng, max_angle);
        UnitQuaternion::from_axis_angle(
            &UnitVector3::new_normalize(Vector3::new(axis[0], axis[1], axis[2])),
            angle,
        )
    } else {
        UnitQuaternion::identity()
    };

    (p, offset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn zero_magnitude_is_exactly_nominal() {
        let nominal = ModelParams::cfb_guards();
        let spec = RandomizationSpec::train().with_magnitude(0.0);
        let mut rng = derive_rng(1, "dr", 0);
        let (p, offset) = sample(&nominal, &spec, &mut rng);
        assert_eq!(p, nominal);
        assert_eq!(offset, UnitQuaternion::identity());
    }

    #[test]
    fn draws_stay_inside_and_cover_intervals() {
        let nominal = ModelParams::cfb_guards();
        let spec = RandomizationSpec::train();
        let mut rng = derive_rng(2, "dr", 0);
        let n = 100_000;
        let mut mass = (f64::INFINITY, f64::NEG_INFINITY);
        let mut jxx = (f64::INFINITY, f64::NEG_INFINITY);
        let mut tc = (f64::INFINITY, f64::NEG_INFINITY);
        let mut cog_r = (f64::INFINITY, f64::NEG_INFINITY);
        let mut angle = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..n {
            let (p, off) = sample(&nominal, &spec, &mut rng);
            let track = |acc: &mut (f64, f64), v: f64| {
                acc.0 = acc.0.min(v);
                acc.1 = acc.1.max(v);
            };
            track(&mut mass, p.mass / nominal.mass);
            track(&mut jxx, p.inertia.x / nominal.inertia.x);
            track(&mut tc, p.motor_tc / nominal.motor_tc);
            track(&mut cog_r, p.cog_offset.norm());
            track(&mut angle, off.angle());
        }
        let check = |name: &str, acc: (f64, f64), lo: f64, hi: f64| {
            assert!(acc.0 >= lo && acc.1 <= hi, "{name} outside: {acc:?}");
            let covered = (acc.1 - acc.0) / (hi - lo);
            assert!(covered >= 0.99, "{name} covers only {covered:.4}");
        };
        check("mass", mass, 0.90, 1.10);
        check("jxx", jxx, 0.80, 1.20);
        check("motor_tc", tc, 0.80, 1.20);
        assert!(cog_r.1 <= 0.01 + 1e-12 && cog_r.0 >= 0.0);
        assert!(cog_r.1 / 0.01 > 0.999, "cog radius max {:.5}", cog_r.1);
        // angle() folds sign, so the covered interval is [0, 15°].
        assert!(angle.1 <= 15.0_f64.to_radians() + 1e-12);
        assert!(angle.1 / 15.0_f64.to_radians() > 0.99);
    }

    #[test]
    fn half_magnitude_halves_intervals() {
        let nominal = ModelParams::cfb_guards();
        let spec = RandomizationSpec::train().with_magnitude(0.5);
        let mut rng = derive_rng(3, "dr", 0);
        for _ in 0..20_000 {
            let (p, _) = sample(&nominal, &spec, &mut rng);
            let ratio = p.mass / nominal.mass;
            assert!((0.95..=1.05).contains(&ratio), "mass ratio {ratio}");
        }
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let nominal = ModelParams::cfb_guards();
        let spec = RandomizationSpec::train();
        let mut a = derive_rng(4, "dr", 9);
        let mut b = derive_rng(4, "dr", 9);
        for _ in 0..100 {
            let (pa, oa) = sample(&nominal, &spec, &mut a);
            let (pb, ob) = sample(&nominal, &spec, &mut b);
            assert_eq!(pa, pb);
            assert_eq!(oa, ob);
        }
    }

    #[test]
    fn disjoint_streams_are_uncorrelated() {
        let nominal = ModelParams::cfb_guards();
        let spec = RandomizationSpec::train();
        let n = 20_000;
        let draws = |idx: u64| -> Vec<f64> {
            let mut rng = derive_rng(5, "dr", idx);
            (0..n)
                .map(|_| sample(&nominal, &spec, &mut rng).0.mass / nominal.mass - 1.0)
                .collect()
        };
        let a = draws(0);
        let b = draws(1);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let ma = mean(&a);
        let mb = mean(&b);
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for i in 0..n {
            cov += (a[i] - ma) * (b[i] - mb);
            va += (a[i] - ma).powi(2);
            vb += (b[i] - mb).powi(2);
        }
        let corr = cov / (va.sqrt() * vb.sqrt());
        assert!(corr.abs() < 0.02, "correlation {corr}");
    }

    #[test]
    fn replay_preset_has_tight_intervals_and_no_offset() {
        let spec = RandomizationSpec::replay();
        assert_eq!(spec.mass_frac, 0.02);
        assert_eq!(spec.cog_radius, 0.002);
        assert_eq!(spec.attitude_offset_deg, 0.0);
        let nominal = ModelParams::cfb_guards();
        let mut rng = derive_rng(6, "dr", 0);
        let (_, off) = sample(&nominal, &spec, &mut rng);
        assert_eq!(off, UnitQuaternion::identity());
    }

    #[test]
    fn kv_round_trip() {
        let spec = RandomizationSpec::train().with_magnitude(0.25);
        let back = RandomizationSpec::from_kv(&spec.to_kv(), &RandomizationSpec::train()).unwrap();
        assert_eq!(spec, back);
        // Overrides on top of a preset.
        let kv = KvMap::parse("magnitude = 0.5\nmass_frac = 0\n").unwrap();
        let spec = RandomizationSpec::from_kv(&kv, &RandomizationSpec::replay()).unwrap();
        assert_eq!(spec.mass_frac, 0.0);
        assert_eq!(spec.magnitude, 0.5);
        assert_eq!(spec.inertia_frac, 0.02);
    }

    #[test]
    fn negative_fraction_rejected() {
        let mut spec = RandomizationSpec::train();
        spec.mass_frac = -0.1;
        assert!(spec.validate().is_err());
    }
}
