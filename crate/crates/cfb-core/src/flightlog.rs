//! Flight-log CSV schema: timestamped state estimates plus motor commands.
//!
//! Fixed column order, bit-exact header. Quaternions are scalar-first and
//! renormalized on ingest (rows with more than 1e-3 norm error are
//! rejected).

use crate::error::CoreError;
use crate::params::ModelParams;
use crate::state::{quat_from_wxyz, MotorCommand, QuadState};
use nalgebra::{UnitQuaternion, Vector3, Vector4};
use std::path::Path;

/// The required header line.
pub const HEADER: &str = "t,px,py,pz,vx,vy,vz,qw,qx,qy,qz,wx,wy,wz,u1,u2,u3,u4";

/// One log record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
    pub w: Vector3<f64>,
    pub u: MotorCommand,
}

/// A parsed flight log with strictly increasing timestamps.
#[derive(Debug, Clone, Default)]
pub struct FlightLog {
    pub rows: Vec<LogRow>,
}

impl FlightLog {
    pub fn new(rows: Vec<LogRow>) -> Self {
        FlightLog { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn duration(&self) -> f64 {
        match (self.rows.first(), self.rows.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    /// Zero-order hold: the command of the last row with `row.t <= t`.
    pub fn command_at(&self, t: f64) -> MotorCommand {
        match self.rows.partition_point(|r| r.t <= t) {
            0 => self.rows.first().map(|r| r.u).unwrap_or(MotorCommand::zero()),
            idx => self.rows[idx - 1].u,
        }
    }

    /// Initial full state for replaying this log: the first row's estimate
    /// with motor speeds at the steady state of the first command.
    pub fn initial_state(&self, params: &ModelParams) -> Result<QuadState, CoreError> {
        let first = self
            .rows
            .first()
            .ok_or_else(|| CoreError::FlightLog("empty log".into()))?;
        Ok(QuadState {
            p: first.p,
            v: first.v,
            q: first.q,
            w: first.w,
            omega: first.u.as_vector() * params.motor_gain,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CoreError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| CoreError::FlightLog("empty file".into()))?;
        if header.trim_end() != HEADER {
            return Err(CoreError::FlightLog(format!(
                "bad header: expected {HEADER:?}, got {header:?}"
            )));
        }
        let mut rows = Vec::new();
        let mut prev_t = f64::NEG_INFINITY;
        for (lineno, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 18 {
                return Err(CoreError::FlightLog(format!(
                    "line {}: expected 18 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let mut vals = [0.0f64; 18];
            for (i, f) in fields.iter().enumerate() {
                vals[i] = f.trim().parse().map_err(|_| {
                    CoreError::FlightLog(format!(
                        "line {}: cannot parse field {} ({f:?})",
                        lineno + 1,
                        i + 1
                    ))
                })?;
            }
            let t = vals[0];
            if t <= prev_t {
                return Err(CoreError::FlightLog(format!(
                    "line {}: timestamps must be strictly increasing ({t} after {prev_t})",
                    lineno + 1
                )));
            }
            prev_t = t;
            let q_norm =
                (vals[7] * vals[7] + vals[8] * vals[8] + vals[9] * vals[9] + vals[10] * vals[10])
                    .sqrt();
            if (q_norm - 1.0).abs() > 1e-3 {
                return Err(CoreError::FlightLog(format!(
                    "line {}: quaternion norm {q_norm} off by more than 1e-3",
                    lineno + 1
                )));
            }
            rows.push(LogRow {
                t,
                p: Vector3::new(vals[1], vals[2], vals[3]),
                v: Vector3::new(vals[4], vals[5], vals[6]),
                q: quat_from_wxyz(vals[7], vals[8], vals[9], vals[10]),
                w: Vector3::new(vals[11], vals[12], vals[13]),
                u: MotorCommand::new([vals[14], vals[15], vals[16], vals[17]]),
            });
        }
        Ok(FlightLog { rows })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(HEADER);
        out.push('\n');
        for r in &self.rows {
            let q = r.q.quaternion();
            let u = r.u.as_vector();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.t,
                r.p.x,
                r.p.y,
                r.p.z,
                r.v.x,
                r.v.y,
                r.v.z,
                q.w,
                q.i,
                q.j,
                q.k,
                r.w.x,
                r.w.y,
                r.w.z,
                u[0],
                u[1],
                u[2],
                u[3]
            ));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::FlightLog(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Row from a state estimate / command pair.
pub fn row_from_estimate(
    t: f64,
    est: &crate::sim::StateEstimate,
    u: MotorCommand,
) -> LogRow {
    LogRow {
        t,
        p: est.p,
        v: est.v,
        q: est.q,
        w: est.w,
        u,
    }
}

/// Per-channel access used by envelopes and fitting (13 state channels).
pub const STATE_CHANNELS: [&str; 13] = [
    "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz", "wx", "wy", "wz",
];

/// Extract the 13 state channels of a `QuadState` in log order.
pub fn state_channels(x: &QuadState) -> [f64; 13] {
    let q = x.q.quaternion();
    [
        x.p.x, x.p.y, x.p.z, x.v.x, x.v.y, x.v.z, q.w, q.i, q.j, q.k, x.w.x, x.w.y, x.w.z,
    ]
}

/// The motor-speed steady state used when a log lacks direct measurements.
pub fn steady_omega(u: &MotorCommand, params: &ModelParams) -> Vector4<f64> {
    u.as_vector() * params.motor_gain
}
