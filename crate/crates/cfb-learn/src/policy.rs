//! The controller function approximator: a tanh MLP trunk with a squashed
//! Gaussian action head, a separate value network of the same shape, and a
//! versioned binary parameter container.
//!
//! Forward and backward passes are written directly for this fixed
//! topology; gradients are verified against finite differences in the
//! acceptance suite.

use crate::error::LearnError;
use cfb_core::state::MotorCommand;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use std::io::Write;
use std::path::Path;

pub const ACTION_DIM: usize = 4;
pub const HIDDEN_WIDTH: usize = 32;
pub const HIDDEN_LAYERS: usize = 4;
const LOG_STD_INIT: f64 = -1.0;
/// Pre-squash action bias at init; logistic(0.2) is near the hover trim.
const ACTION_BIAS_INIT: f64 = 0.2;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln |d logistic(z) / dz|`, the squash log-density correction.
pub fn squash_log_jacobian(z: f64) -> f64 {
    -(softplus(z) + softplus(-z))
}

/// One dense layer, `out x in` weights plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Dense {
    fn zeros(rows: usize, cols: usize) -> Self {
        Dense {
            w: DMatrix::zeros(rows, cols),
            b: DVector::zeros(rows),
        }
    }
}

/// MLP with tanh hidden activations and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Cached activations of a batched forward pass (inputs plus each hidden
/// layer's tanh output), consumed by the backward pass.
pub struct MlpCache {
    activations: Vec<DMatrix<f64>>,
}

impl Mlp {
    /// Layer dims `[in, h1, ..., out]`.
    pub fn zeros(dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Dense::zeros(w[1], w[0]))
            .collect();
        Mlp { layers }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].w.ncols()];
        dims.extend(self.layers.iter().map(|l| l.w.nrows()));
        dims
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    /// Forward for a batch of column observations.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, MlpCache) {
        let mut activations = Vec::with_capacity(self.layers.len());
        activations.push(x.clone());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.w * &h;
            for mut col in z.column_iter_mut() {
                col += &layer.b;
            }
            if i + 1 < self.layers.len() {
                z.apply(|v| *v = v.tanh());
                activations.push(z.clone());
            }
            h = z;
        }
        (h, MlpCache { activations })
    }

    /// Forward for a single observation without caching.
    pub fn forward_one(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.w * &h + &layer.b;
            if i + 1 < self.layers.len() {
                z.apply(|v| *v = v.tanh());
            }
            h = z;
        }
        h
    }

    /// Backward pass: given `d loss / d output` (same shape as the batched
    /// output), accumulate parameter gradients into `grads` and return
    /// nothing else. `grads` must have this MLP's shape.
    pub fn backward_batch(&self, cache: &MlpCache, mut delta: DMatrix<f64>, grads: &mut Mlp) {
        for i in (0..self.layers.len()).rev() {
            let input = &cache.activations[i];
            grads.layers[i].w += &delta * input.transpose();
            for col in delta.column_iter() {
                grads.layers[i].b += col;
            }
            if i > 0 {
                let mut upstream = self.layers[i].w.transpose() * delta;
                // Through tanh: (1 - a^2) elementwise.
                upstream.zip_apply(&cache.activations[i], |u, a| *u *= 1.0 - a * a);
                delta = upstream;
            }
        }
    }

    fn visit<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        for l in &self.layers {
            out.push(l.w.as_slice());
            out.push(l.b.as_slice());
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        for l in &mut self.layers {
            out.push(l.w.as_mut_slice());
            out.push(l.b.as_mut_slice());
        }
    }
}

/// Policy + value parameters.
///
/// The actor trunk maps observations to pre-squash action means; actions
/// are `logistic(z)` of a Gaussian with state-independent learned log-std.
/// The critic is an untied network of the same trunk shape with one output.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub actor: Mlp,
    pub log_std: DVector<f64>,
    pub critic: Mlp,
}

/// How the action head is read out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Deterministic,
    Stochastic,
}

/// Result of one policy query.
#[derive(Debug, Clone)]
pub struct ActionSample {
    pub u: MotorCommand,
    /// Pre-squash action (what the log-probability refers to).
    pub z: [f64; ACTION_DIM],
    /// Squash-corrected log-density of `u`.
    pub log_prob: f64,
}

impl Policy {
    /// Standard topology: four hidden layers of 32 units for both heads.
    pub fn dims_for(obs_dim: usize) -> Vec<usize> {
        let mut dims = vec![obs_dim];
        dims.extend(std::iter::repeat(HIDDEN_WIDTH).take(HIDDEN_LAYERS));
        dims
    }

    pub fn zeros(obs_dim: usize) -> Self {
        Self::zeros_with(obs_dim, &Self::dims_for(obs_dim)[1..])
    }

    /// General constructor used by reduced test policies.
    pub fn zeros_with(obs_dim: usize, hidden: &[usize]) -> Self {
        let mut actor_dims = vec![obs_dim];
        actor_dims.extend_from_slice(hidden);
        actor_dims.push(ACTION_DIM);
        let mut critic_dims = vec![obs_dim];
        critic_dims.extend_from_slice(hidden);
        critic_dims.push(1);
        Policy {
            actor: Mlp::zeros(&actor_dims),
            log_std: DVector::from_element(ACTION_DIM, 0.0),
            critic: Mlp::zeros(&critic_dims),
        }
    }

    /// Orthogonal-style initialization: orthonormal weight rows/columns
    /// scaled by sqrt(2) in the trunk, a small 0.01 gain on the action
    /// head and unit gain on the value head; zero biases; log-std at
    /// `LOG_STD_INIT`.
    pub fn init<R: Rng + ?Sized>(obs_dim: usize, rng: &mut R) -> Self {
        Self::init_with(obs_dim, &Self::dims_for(obs_dim)[1..], rng)
    }

    pub fn init_with<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        Self::init_custom(obs_dim, hidden, LOG_STD_INIT, ACTION_BIAS_INIT, rng)
    }

    /// Initialization with explicit exploration std and action-head bias.
    pub fn init_custom<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: &[usize],
        log_std_init: f64,
        action_bias: f64,
        rng: &mut R,
    ) -> Self {
        let mut policy = Self::zeros_with(obs_dim, hidden);
        let n_actor = policy.actor.layers.len();
        for (i, layer) in policy.actor.layers.iter_mut().enumerate() {
            let gain = if i + 1 == n_actor { 0.01 } else { 2.0_f64.sqrt() };
            layer.w = orthogonal(layer.w.nrows(), layer.w.ncols(), gain, rng);
            if i + 1 == n_actor {
                layer.b.fill(action_bias);
            }
        }
        let n_critic = policy.critic.layers.len();
        for (i, layer) in policy.critic.layers.iter_mut().enumerate() {
            let gain = if i + 1 == n_critic { 1.0 } else { 2.0_f64.sqrt() };
            layer.w = orthogonal(layer.w.nrows(), layer.w.ncols(), gain, rng);
        }
        policy.log_std.fill(log_std_init);
        policy
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.in_dim()
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Parameter slices in a fixed order (actor, log-std, critic).
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        self.actor.visit(&mut out);
        out.push(self.log_std.as_slice());
        self.critic.visit(&mut out);
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.actor.visit_mut(&mut out);
        out.push(self.log_std.as_mut_slice());
        self.critic.visit_mut(&mut out);
        out
    }

    /// Same-shaped zero buffer (for gradients and optimizer state).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.param_slices_mut() {
            s.fill(0.0);
        }
        z
    }

    pub fn std(&self) -> [f64; ACTION_DIM] {
        let mut out = [0.0; ACTION_DIM];
        for i in 0..ACTION_DIM {
            out[i] = self.log_std[i].exp();
        }
        out
    }

    /// Query the policy for one observation.
    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &DVector<f64>,
        mode: ForwardMode,
        rng: &mut R,
    ) -> Result<ActionSample, LearnError> {
        if obs.len() != self.obs_dim() {
            return Err(LearnError::DimMismatch {
                what: "observation".into(),
                expected: self.obs_dim(),
                got: obs.len(),
            });
        }
        let mean = self.actor.forward_one(obs);
        let mut z = [0.0; ACTION_DIM];
        let std = self.std();
        for i in 0..ACTION_DIM {
            z[i] = match mode {
                ForwardMode::Deterministic => mean[i],
                ForwardMode::Stochastic => {
                    mean[i] + std[i] * rng.sample::<f64, _>(StandardNormal)
                }
            };
        }
        Ok(self.sample_from_mean(&mean, z))
    }

    /// Build the sample record for a fixed pre-squash action `z`.
    pub fn sample_from_mean(&self, mean: &DVector<f64>, z: [f64; ACTION_DIM]) -> ActionSample {
        let mut u = [0.0; ACTION_DIM];
        let mut log_prob = 0.0;
        for i in 0..ACTION_DIM {
            u[i] = logistic(z[i]);
            let sigma = self.log_std[i].exp();
            let resid = (z[i] - mean[i]) / sigma;
            log_prob += -self.log_std[i] - HALF_LN_2PI - 0.5 * resid * resid;
            // Change of variables u = logistic(z): divide by |du/dz|.
            log_prob -= squash_log_jacobian(z[i]);
        }
        ActionSample { u: MotorCommand::new(u), z, log_prob }
    }

    /// State value for one observation.
    pub fn value_one(&self, obs: &DVector<f64>) -> f64 {
        self.critic.forward_one(obs)[0]
    }

    /// Entropy of the pre-squash Gaussian.
    pub fn gaussian_entropy(&self) -> f64 {
        self.log_std.iter().map(|ls| ls + 0.5 + HALF_LN_2PI).sum()
    }

    // ---- persistence -----------------------------------------------------

    /// Serialize to the versioned binary container.
    pub fn save(&self, path: &Path) -> Result<(), LearnError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        push_u32(&mut buf, FORMAT_VERSION);
        let tensors = self.named_tensors();
        push_u32(&mut buf, tensors.len() as u32);
        for (name, rows, cols, data) in tensors {
            push_u32(&mut buf, name.len() as u32);
            buf.extend_from_slice(name.as_bytes());
            push_u32(&mut buf, rows as u32);
            push_u32(&mut buf, cols as u32);
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)
            .map_err(|e| LearnError::File(format!("cannot create {}: {e}", path.display())))?;
        f.write_all(&buf)
            .map_err(|e| LearnError::File(format!("write {}: {e}", path.display())))?;
        Ok(())
    }

    /// Load from the binary container, validating the shape manifest.
    pub fn load(path: &Path) -> Result<Self, LearnError> {
        let bytes = std::fs::read(path)
            .map_err(|e| LearnError::File(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LearnError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(LearnError::File("not a policy file (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(LearnError::File(format!(
                "unsupported policy file version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let count = cur.u32()? as usize;
        let mut tensors: Vec<(String, usize, usize, Vec<f64>)> = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| LearnError::File("tensor name is not valid UTF-8".into()))?;
            let rows = cur.u32()? as usize;
            let cols = cur.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| LearnError::File(format!("tensor {name}: size overflow")))?;
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(cur.f64()?);
            }
            tensors.push((name, rows, cols, data));
        }

        // Reconstruct the topology from the manifest.
        let find = |name: &str| -> Result<&(String, usize, usize, Vec<f64>), LearnError> {
            tensors
                .iter()
                .find(|(n, _, _, _)| n == name)
                .ok_or_else(|| LearnError::File(format!("missing tensor {name:?}")))
        };
        let n_actor = tensors
            .iter()
            .filter(|(n, _, _, _)| n.starts_with("actor.") && n.ends_with(".w"))
            .count();
        let n_critic = tensors
            .iter()
            .filter(|(n, _, _, _)| n.starts_with("critic.") && n.ends_with(".w"))
            .count();
        if n_actor == 0 || n_critic == 0 {
            return Err(LearnError::File("no actor/critic tensors present".into()));
        }
        let obs_dim = find("actor.0.w")?.2;
        let mut hidden = Vec::new();
        for i in 0..n_actor.saturating_sub(1) {
            hidden.push(find(&format!("actor.{i}.w"))?.1);
        }
        let mut policy = Policy::zeros_with(obs_dim, &hidden);
        if policy.critic.layers.len() != n_critic {
            return Err(LearnError::File(format!(
                "critic has {n_critic} layers, expected {}",
                policy.critic.layers.len()
            )));
        }
        let expected = policy.named_shapes();
        if expected.len() != tensors.len() {
            return Err(LearnError::File(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, rows, cols) in expected {
            let (_, r, c, data) = find(&name)?;
            if (*r, *c) != (rows, cols) {
                return Err(LearnError::DimMismatchTensor {
                    tensor: name,
                    expected: (rows, cols),
                    got: (*r, *c),
                });
            }
            policy.write_tensor(&name, data);
        }
        Ok(policy)
    }

    /// Load and additionally require a specific observation dimension.
    pub fn load_expecting(path: &Path, obs_dim: usize) -> Result<Self, LearnError> {
        let policy = Self::load(path)?;
        if policy.obs_dim() != obs_dim {
            return Err(LearnError::DimMismatchTensor {
                tensor: "actor.0.w".into(),
                expected: (policy.actor.layers[0].w.nrows(), obs_dim),
                got: (policy.actor.layers[0].w.nrows(), policy.obs_dim()),
            });
        }
        Ok(policy)
    }

    /// Flat text export, one tensor per block, for inspection.
    pub fn export_text(&self) -> String {
        let mut out = String::new();
        for (name, rows, cols, data) in self.named_tensors() {
            out.push_str(&format!("# tensor {name} {rows} {cols}\n"));
            for r in 0..rows {
                let row: Vec<String> = (0..cols)
                    .map(|c| format!("{}", data[c * rows + r]))
                    .collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out
    }

    fn named_shapes(&self) -> Vec<(String, usize, usize)> {
        self.named_tensors()
            .into_iter()
            .map(|(n, r, c, _)| (n, r, c))
            .collect()
    }

    /// (name, rows, cols, column-major data) for every tensor.
    fn named_tensors(&self) -> Vec<(String, usize, usize, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.actor.layers.iter().enumerate() {
            out.push((format!("actor.{i}.w"), l.w.nrows(), l.w.ncols(), l.w.as_slice().to_vec()));
            out.push((format!("actor.{i}.b"), l.b.len(), 1, l.b.as_slice().to_vec()));
        }
        out.push(("log_std".into(), self.log_std.len(), 1, self.log_std.as_slice().to_vec()));
        for (i, l) in self.critic.layers.iter().enumerate() {
            out.push((format!("critic.{i}.w"), l.w.nrows(), l.w.ncols(), l.w.as_slice().to_vec()));
            out.push((format!("critic.{i}.b"), l.b.len(), 1, l.b.as_slice().to_vec()));
        }
        out
    }

    fn write_tensor(&mut self, name: &str, data: &[f64]) {
        let target: &mut [f64] = if name == "log_std" {
            self.log_std.as_mut_slice()
        } else {
            let idx: usize = name
                .split('.')
                .nth(1)
                .and_then(|s| s.parse().ok())
                .expect("validated tensor name");
            let net = if name.starts_with("actor.") {
                &mut self.actor
            } else {
                &mut self.critic
            };
            if name.ends_with(".w") {
                net.layers[idx].w.as_mut_slice()
            } else {
                net.layers[idx].b.as_mut_slice()
            }
        };
        target.copy_from_slice(data);
    }
}

const MAGIC: &[u8] = b"CFBPOL\x00\x01";
const FORMAT_VERSION: u32 = 1;

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LearnError> {
        if self.pos + n > self.bytes.len() {
            return Err(LearnError::File("truncated policy file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, LearnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, LearnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Orthogonal matrix initialization with gain.
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> DMatrix<f64> {
    let transpose = rows < cols;
    let (m, n) = if transpose { (cols, rows) } else { (rows, cols) };
    let a = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    // Fix the sign ambiguity so the distribution is uniform over O(n).
    let r = qr.r();
    for j in 0..n.min(q.ncols()) {
        if r[(j, j)] < 0.0 {
            for i in 0..q.nrows() {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let q = if transpose { q.transpose() } else { q };
    q * gain
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use cfb_core::rng::derive_rng;

    #[test]
    fn zero_params_deterministic_gives_half_commands() {
        let policy = Policy::zeros(10);
        let obs = DVector::from_element(10, 0.3);
        let mut rng = derive_rng(0, "test", 0);
        let a = policy.act(&obs, ForwardMode::Deterministic, &mut rng).unwrap();
        for i in 0..4 {
            assert_eq!(a.u[i], 0.5);
        }
    }

    #[test]
    fn tiny_std_approaches_deterministic_output() {
        let mut rng = derive_rng(1, "test", 0);
        let mut policy = Policy::init(12, &mut rng);
        policy.log_std.fill(-40.0);
        let obs = DVector::from_fn(12, |i, _| (i as f64 * 0.37).sin());
        let det = policy.act(&obs, ForwardMode::Deterministic, &mut rng).unwrap();
        let sto = policy.act(&obs, ForwardMode::Stochastic, &mut rng).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(det.u[i], sto.u[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn same_stream_state_same_action() {
        let mut init_rng = derive_rng(2, "test", 0);
        let policy = Policy::init(8, &mut init_rng);
        let obs = DVector::from_element(8, 0.1);
        let mut a = derive_rng(3, "act", 0);
        let mut b = derive_rng(3, "act", 0);
        let sa = policy.act(&obs, ForwardMode::Stochastic, &mut a).unwrap();
        let sb = policy.act(&obs, ForwardMode::Stochastic, &mut b).unwrap();
        assert_eq!(sa.z, sb.z);
        assert_eq!(sa.log_prob, sb.log_prob);
    }

    #[test]
    fn outputs_always_in_open_unit_interval() {
        let mut rng = derive_rng(4, "test", 0);
        let policy = Policy::init(6, &mut rng);
        for k in 0..200 {
            let obs = DVector::from_fn(6, |i, _| ((i + k) as f64 * 1.7).sin() * 100.0);
            let a = policy.act(&obs, ForwardMode::Stochastic, &mut rng).unwrap();
            for i in 0..4 {
                assert!(a.u[i] > 0.0 && a.u[i] < 1.0);
            }
        }
    }

    #[test]
    fn two_inits_with_same_seed_identical() {
        let a = Policy::init(47, &mut derive_rng(5, "init", 0));
        let b = Policy::init(47, &mut derive_rng(5, "init", 0));
        assert_eq!(a, b);
    }

    #[test]
    fn orthogonal_init_has_orthonormal_rows() {
        let mut rng = derive_rng(6, "test", 0);
        let w = orthogonal(4, 32, 1.0, &mut rng);
        let gram = &w * w.transpose();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(gram[(i, j)], expect, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn save_load_round_trips_bitwise() {
        let dir = std::env::temp_dir().join("cfb_policy_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.policy");
        let policy = Policy::init(47, &mut derive_rng(7, "init", 0));
        policy.save(&path).unwrap();
        let back = Policy::load(&path).unwrap();
        assert_eq!(policy, back);
    }

    #[test]
    fn load_with_wrong_obs_dim_names_layer() {
        let dir = std::env::temp_dir().join("cfb_policy_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p47.policy");
        Policy::init(47, &mut derive_rng(8, "init", 0)).save(&path).unwrap();
        match Policy::load_expecting(&path, 49) {
            Err(LearnError::DimMismatchTensor { tensor, .. }) => {
                assert_eq!(tensor, "actor.0.w");
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_file_rejected() {
        assert!(Policy::from_bytes(b"not a policy").is_err());
        // Truncated file.
        let dir = std::env::temp_dir().join("cfb_policy_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.policy");
        Policy::init(6, &mut derive_rng(9, "init", 0)).save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(Policy::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    }

    #[test]
    fn log_prob_density_integrates_to_one() {
        // Integrate the reported density over a fine grid of one action
        // dimension; the squash correction must make the mass come out 1.
        let mut rng = derive_rng(10, "test", 0);
        let policy = Policy::init(5, &mut rng);
        let obs = DVector::from_fn(5, |i, _| 0.2 * i as f64);
        let mean = policy.actor.forward_one(&obs);
        let base = policy.act(&obs, ForwardMode::Stochastic, &mut rng).unwrap();
        for dim in 0..ACTION_DIM {
            let n = 20_000;
            let mut mass = 0.0;
            let du = 1.0 / n as f64;
            for k in 0..n {
                let u = (k as f64 + 0.5) * du;
                let mut z = base.z;
                z[dim] = (u / (1.0 - u)).ln();
                let s = policy.sample_from_mean(&mean, z);
                // Divide out the fixed density of the other dimensions.
                let mut other = 0.0;
                for j in 0..ACTION_DIM {
                    if j != dim {
                        let sigma = policy.log_std[j].exp();
                        let resid = (z[j] - mean[j]) / sigma;
                        other += -policy.log_std[j] - HALF_LN_2PI - 0.5 * resid * resid
                            - squash_log_jacobian(z[j]);
                    }
                }
                mass += (s.log_prob - other).exp() * du;
            }
            assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn batched_and_single_forward_agree() {
        let mut rng = derive_rng(11, "test", 0);
        let policy = Policy::init(9, &mut rng);
        let obs: Vec<DVector<f64>> = (0..7)
            .map(|k| DVector::from_fn(9, |i, _| ((i * 7 + k) as f64 * 0.13).cos()))
            .collect();
        let x = DMatrix::from_fn(9, 7, |i, j| obs[j][i]);
        let (mu, _) = policy.actor.forward_batch(&x);
        let (v, _) = policy.critic.forward_batch(&x);
        for j in 0..7 {
            let one = policy.actor.forward_one(&obs[j]);
            for i in 0..4 {
                assert_abs_diff_eq!(mu[(i, j)], one[i], epsilon = 1e-13);
            }
            assert_abs_diff_eq!(v[(0, j)], policy.value_one(&obs[j]), epsilon = 1e-13);
        }
    }

    #[test]
    fn text_export_contains_all_tensors() {
        let policy = Policy::init(6, &mut derive_rng(12, "init", 0));
        let text = policy.export_text();
        assert!(text.contains("# tensor actor.0.w 32 6"));
        assert!(text.contains("# tensor log_std 4 1"));
        assert!(text.contains("# tensor critic.4.w 1 32"));
    }
}
