//! Invertible coupling-stack regressor with optional self-attention heads.
//!
//! The model maps a normalized 12-d state/torque input, concatenated with the
//! spacecraft inertia conditioning, through a stack of affine coupling layers
//! (alternating even/odd masks) and one of three output heads to an `S×3`
//! block of predicted body-rate changes in normalized target units:
//!
//! - `Plain` — skip-connect the input onto the coupling features and project.
//! - `AttnFeatures` — expand the features into `S` tokens; query, key, and
//!   value all come from the tokens.
//! - `AttnTorque` — value from the tokens; query and key from the commanded
//!   torque concatenated with the inertia conditioning.
//!
//! The coupling stack is exactly invertible; the heads are not.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::dataset::Normalization;
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::tensor::Tensor;

const WEIGHTS_MAGIC: &[u8; 4] = b"SFNW";
const WEIGHTS_VERSION: u32 = 1;

/// Width of the coupling features: 12 input dims + 9 body-inertia entries
/// + 3 wheel-inertia diagonal entries.
pub const FEATURE_WIDTH: usize = 24;
/// Conditioning width: body inertia (9) + wheel diagonal (3) + inverse (9).
pub const COND_WIDTH: usize = 21;
const HALF_WIDTH: usize = FEATURE_WIDTH / 2;
/// Pre-head width: coupling features + full conditioning.
const PRE_HEAD_WIDTH: usize = FEATURE_WIDTH + COND_WIDTH;
/// Query/key input width for the torque-conditioned head: torque (3) + full
/// conditioning (21).
const TORQUE_QK_WIDTH: usize = 3 + COND_WIDTH;

/// Output head variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Input skip connection straight into the output projection.
    Plain,
    /// Self-attention with query/key/value all derived from the flow output.
    AttnFeatures,
    /// Self-attention with query/key derived from the commanded torque and
    /// inertia conditioning.
    AttnTorque,
}

impl Head {
    fn tag(self) -> u8 {
        match self {
            Head::Plain => 0,
            Head::AttnFeatures => 1,
            Head::AttnTorque => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Head::Plain),
            1 => Ok(Head::AttnFeatures),
            2 => Ok(Head::AttnTorque),
            other => Err(Error::ModelFormat(format!("unknown head tag {other}"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub coupling_layers: usize,
    /// Hidden FC layers in each scale/shift network.
    pub hidden_layers: usize,
    pub hidden_units: usize,
    /// Number of predicted steps `S`.
    pub steps: usize,
    pub head: Head,
    pub token_dim: usize,
    /// Bound on the scale network output (tanh-clamped).
    pub scale_clamp: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            coupling_layers: 4,
            hidden_layers: 2,
            hidden_units: 64,
            steps: 10,
            head: Head::AttnTorque,
            token_dim: 16,
            scale_clamp: 2.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coupling_layers < 1
            || self.hidden_layers < 1
            || self.hidden_units < 1
            || self.steps < 1
            || self.token_dim < 1
        {
            return Err(Error::InvalidConfig("all model dimensions must be at least 1".into()));
        }
        if self.scale_clamp <= 0.0 {
            return Err(Error::InvalidConfig("scale clamp must be positive".into()));
        }
        Ok(())
    }
}

fn mask_indices(parity: usize) -> (Vec<usize>, Vec<usize>) {
    let even: Vec<usize> = (0..FEATURE_WIDTH).step_by(2).collect();
    let odd: Vec<usize> = (1..FEATURE_WIDTH).step_by(2).collect();
    if parity % 2 == 0 {
        (even, odd)
    } else {
        (odd, even)
    }
}

/// The regressor: configuration, input/target statistics, and the named
/// parameter tensors in a fixed creation order.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub config: ModelConfig,
    pub normalization: Normalization,
    /// Inertia conditioning of the spacecraft the model was trained for;
    /// evaluation and control feed this vector regardless of the data source.
    pub conditioning: [f64; COND_WIDTH],
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape handles of the model parameters, in parameter order.
pub struct ModelVars {
    vars: Vec<Var>,
}

impl ModelVars {
    pub fn handles(&self) -> &[Var] {
        &self.vars
    }

    /// Wrap externally created leaf handles (must follow parameter order).
    pub fn from_handles(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

struct ParamBuilder {
    rng: ChaCha8Rng,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamBuilder {
    fn uniform(&mut self, shape: Vec<usize>, limit: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel)
            .map(|_| self.rng.gen_range(-limit..limit))
            .collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    fn glorot(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = self.uniform(vec![fan_in, fan_out], limit);
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    /// Near-zero init for output projections: keeps the untrained model an
    /// (almost) zero predictor without creating dead gradients.
    fn small(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let t = self.uniform(vec![fan_in, fan_out], 1e-3);
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    fn bias(&mut self, name: &str, n: usize) {
        self.names.push(name.to_string());
        self.tensors.push(Tensor::zeros(vec![n]));
    }
}

impl FlowModel {
    /// Fresh model with seeded initialization. Hidden layers use
    /// Glorot-uniform weights; the final layer of every scale/shift network
    /// and the output projection start near zero.
    pub fn new(
        config: ModelConfig,
        normalization: Normalization,
        conditioning: [f64; COND_WIDTH],
    ) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            names: Vec::new(),
            tensors: Vec::new(),
        };
        let h = config.hidden_units;
        for layer in 0..config.coupling_layers {
            for net in ["scale", "shift"] {
                let prefix = format!("coupling{layer}.{net}");
                let mut fan_in = HALF_WIDTH;
                for l in 0..config.hidden_layers {
                    b.glorot(&format!("{prefix}.w{l}"), fan_in, h);
                    b.bias(&format!("{prefix}.b{l}"), h);
                    fan_in = h;
                }
                let out_l = config.hidden_layers;
                b.small(&format!("{prefix}.w{out_l}"), fan_in, HALF_WIDTH);
                b.bias(&format!("{prefix}.b{out_l}"), HALF_WIDTH);
            }
        }
        let s = config.steps;
        let d = config.token_dim;
        match config.head {
            Head::Plain => {
                b.small("head.out.w", PRE_HEAD_WIDTH + 12, s * 3);
                b.bias("head.out.b", s * 3);
            }
            Head::AttnFeatures => {
                b.glorot("head.tokens.w", PRE_HEAD_WIDTH, s * d);
                b.bias("head.tokens.b", s * d);
                b.glorot("head.value.w", d, d);
                b.bias("head.value.b", d);
                b.glorot("head.query.w", d, d);
                b.bias("head.query.b", d);
                b.glorot("head.key.w", d, d);
                b.bias("head.key.b", d);
                b.small("head.out.w", d, 3);
                b.bias("head.out.b", 3);
            }
            Head::AttnTorque => {
                b.glorot("head.tokens.w", PRE_HEAD_WIDTH, s * d);
                b.bias("head.tokens.b", s * d);
                b.glorot("head.value.w", d, d);
                b.bias("head.value.b", d);
                b.glorot("head.query.w", TORQUE_QK_WIDTH, s * d);
                b.bias("head.query.b", s * d);
                b.glorot("head.key.w", TORQUE_QK_WIDTH, s * d);
                b.bias("head.key.b", s * d);
                b.small("head.out.w", d, 3);
                b.bias("head.out.b", 3);
            }
        }
        Ok(Self {
            config,
            normalization,
            conditioning,
            names: b.names,
            tensors: b.tensors,
        })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let idx = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[idx])
    }

    fn param_index(&self, name: &str) -> usize {
        self.names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter {name} exists by construction"))
    }

    /// Insert every parameter into `tape` as a leaf, in parameter order.
    pub fn bind(&self, tape: &mut Tape, needs_grad: bool) -> ModelVars {
        ModelVars {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), needs_grad))
                .collect(),
        }
    }

    fn mlp_graph(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        for l in 0..=self.config.hidden_layers {
            let w = vars.vars[self.param_index(&format!("{prefix}.w{l}"))];
            let bias = vars.vars[self.param_index(&format!("{prefix}.b{l}"))];
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, bias)?;
            if l < self.config.hidden_layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    fn coupling_graph(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        layer: usize,
        x: Var,
    ) -> Result<Var> {
        let (keep, transform) = mask_indices(layer);
        let kept = tape.gather_cols(x, &keep)?;
        let moved = tape.gather_cols(x, &transform)?;
        let s_raw = self.mlp_graph(tape, vars, &format!("coupling{layer}.scale"), kept)?;
        let s_bounded = tape.tanh(s_raw);
        let s = tape.scale(s_bounded, self.config.scale_clamp);
        let t = self.mlp_graph(tape, vars, &format!("coupling{layer}.shift"), kept)?;
        let es = tape.exp(s);
        let scaled = tape.mul(moved, es)?;
        let y = tape.add(scaled, t)?;
        tape.interleave_cols(kept, y, &keep, &transform)
    }

    /// Full forward pass as a tape graph: normalized input `[B,12]` to
    /// normalized predictions `[B, S*3]`.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        input_norm: Var,
        cond: &[f64; COND_WIDTH],
    ) -> Result<Var> {
        let batch = tape.value(input_norm).rows2();
        if tape.value(input_norm).cols2() != 12 {
            return Err(Error::ShapeMismatch(format!(
                "model input must be [B,12], got {:?}",
                tape.value(input_norm).shape()
            )));
        }
        let cond_inertia = tape.constant(Tensor::tile_rows(batch, &cond[..12]));
        let cond_full = tape.constant(Tensor::tile_rows(batch, cond));

        let mut features = tape.concat_cols(&[input_norm, cond_inertia])?;
        for layer in 0..self.config.coupling_layers {
            features = self.coupling_graph(tape, vars, layer, features)?;
        }
        let pre_head = tape.concat_cols(&[features, cond_full])?;

        let s = self.config.steps;
        let d = self.config.token_dim;
        match self.config.head {
            Head::Plain => {
                let skip = tape.concat_cols(&[pre_head, input_norm])?;
                let w = vars.vars[self.param_index("head.out.w")];
                let bias = vars.vars[self.param_index("head.out.b")];
                let out = tape.matmul(skip, w)?;
                tape.add_row(out, bias)
            }
            Head::AttnFeatures | Head::AttnTorque => {
                let wt = vars.vars[self.param_index("head.tokens.w")];
                let bt = vars.vars[self.param_index("head.tokens.b")];
                let tokens_flat = tape.matmul(pre_head, wt)?;
                let tokens_flat = tape.add_row(tokens_flat, bt)?;
                let tokens_2d = tape.reshape(tokens_flat, vec![batch * s, d])?;

                let wv = vars.vars[self.param_index("head.value.w")];
                let bv = vars.vars[self.param_index("head.value.b")];
                let v2 = tape.matmul(tokens_2d, wv)?;
                let v2 = tape.add_row(v2, bv)?;
                let value = tape.reshape(v2, vec![batch, s, d])?;

                let (query, key) = match self.config.head {
                    Head::AttnFeatures => {
                        let wq = vars.vars[self.param_index("head.query.w")];
                        let bq = vars.vars[self.param_index("head.query.b")];
                        let q2 = tape.matmul(tokens_2d, wq)?;
                        let q2 = tape.add_row(q2, bq)?;
                        let query = tape.reshape(q2, vec![batch, s, d])?;
                        let wk = vars.vars[self.param_index("head.key.w")];
                        let bk = vars.vars[self.param_index("head.key.b")];
                        let k2 = tape.matmul(tokens_2d, wk)?;
                        let k2 = tape.add_row(k2, bk)?;
                        let key = tape.reshape(k2, vec![batch, s, d])?;
                        (query, key)
                    }
                    Head::AttnTorque => {
                        let torque = tape.slice_cols(input_norm, 6, 9)?;
                        let qk_in = tape.concat_cols(&[torque, cond_full])?;
                        let wq = vars.vars[self.param_index("head.query.w")];
                        let bq = vars.vars[self.param_index("head.query.b")];
                        let q2 = tape.matmul(qk_in, wq)?;
                        let q2 = tape.add_row(q2, bq)?;
                        let query = tape.reshape(q2, vec![batch, s, d])?;
                        let wk = vars.vars[self.param_index("head.key.w")];
                        let bk = vars.vars[self.param_index("head.key.b")];
                        let k2 = tape.matmul(qk_in, wk)?;
                        let k2 = tape.add_row(k2, bk)?;
                        let key = tape.reshape(k2, vec![batch, s, d])?;
                        (query, key)
                    }
                    Head::Plain => unreachable!(),
                };

                let key_t = tape.transpose_last(key)?;
                let scores = tape.bmm(query, key_t)?;
                let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
                let attn = tape.softmax_last(scores)?;
                let mixed = tape.bmm(attn, value)?;

                let wo = vars.vars[self.param_index("head.out.w")];
                let bo = vars.vars[self.param_index("head.out.b")];
                let mixed_2d = tape.reshape(mixed, vec![batch * s, d])?;
                let out = tape.matmul(mixed_2d, wo)?;
                let out = tape.add_row(out, bo)?;
                tape.reshape(out, vec![batch, s * 3])
            }
        }
    }

    /// Plain inference: normalized input `[B,12]` to normalized `[B,S*3]`.
    pub fn forward(&self, input_norm: &Tensor, cond: &[f64; COND_WIDTH]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let input = tape.constant(input_norm.clone());
        let out = self.forward_graph(&mut tape, &vars, input, cond)?;
        Ok(tape.value(out).clone())
    }

    /// One-step prediction for control use: raw state and torque in, raw
    /// `Δω̂` out (row 0 of the window, de-normalized).
    pub fn predict_next(
        &self,
        omega: Vec3,
        omega_rw: Vec3,
        u_rw: Vec3,
        omega_dot: Vec3,
        cond: &[f64; COND_WIDTH],
    ) -> Result<Vec3> {
        let raw = [
            omega.x, omega.y, omega.z,
            omega_rw.x, omega_rw.y, omega_rw.z,
            u_rw.x, u_rw.y, u_rw.z,
            omega_dot.x, omega_dot.y, omega_dot.z,
        ];
        let norm_in = self.normalization.normalize_input(&raw);
        let out = self.forward(&Tensor::row(&norm_in), cond)?;
        let row = self
            .normalization
            .denormalize_target([out.data()[0], out.data()[1], out.data()[2]]);
        Ok(Vec3::from_array(row))
    }

    /// Push raw features `[B,24]` through the coupling stack only.
    pub fn coupling_forward_features(&self, features: &Tensor) -> Result<Tensor> {
        if features.rank() != 2 || features.cols2() != FEATURE_WIDTH {
            return Err(Error::ShapeMismatch(format!(
                "coupling features must be [B,{FEATURE_WIDTH}], got {:?}",
                features.shape()
            )));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let mut x = tape.constant(features.clone());
        for layer in 0..self.config.coupling_layers {
            x = self.coupling_graph(&mut tape, &vars, layer, x)?;
        }
        Ok(tape.value(x).clone())
    }

    /// Analytic inverse of the coupling stack.
    pub fn coupling_inverse_features(&self, features: &Tensor) -> Result<Tensor> {
        if features.rank() != 2 || features.cols2() != FEATURE_WIDTH {
            return Err(Error::ShapeMismatch(format!(
                "coupling features must be [B,{FEATURE_WIDTH}], got {:?}",
                features.shape()
            )));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let mut x = tape.constant(features.clone());
        for layer in (0..self.config.coupling_layers).rev() {
            let (keep, transform) = mask_indices(layer);
            let kept = tape.gather_cols(x, &keep)?;
            let moved = tape.gather_cols(x, &transform)?;
            let s_raw = self.mlp_graph(&mut tape, &vars, &format!("coupling{layer}.scale"), kept)?;
            let s_bounded = tape.tanh(s_raw);
            let s = tape.scale(s_bounded, self.config.scale_clamp);
            let t = self.mlp_graph(&mut tape, &vars, &format!("coupling{layer}.shift"), kept)?;
            let neg_s = tape.neg(s);
            let es_inv = tape.exp(neg_s);
            let shifted = tape.sub(moved, t)?;
            let orig = tape.mul(shifted, es_inv)?;
            x = tape.interleave_cols(kept, orig, &keep, &transform)?;
        }
        Ok(tape.value(x).clone())
    }

    /// Bit-exact binary serialization: config, normalization, and the named
    /// parameter table.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(WEIGHTS_MAGIC);
        buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        let c = &self.config;
        for v in [
            c.coupling_layers as u32,
            c.hidden_layers as u32,
            c.hidden_units as u32,
            c.steps as u32,
            c.token_dim as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(c.head.tag());
        buf.extend_from_slice(&c.scale_clamp.to_le_bytes());
        buf.extend_from_slice(&c.seed.to_le_bytes());
        let n = &self.normalization;
        for v in n
            .input_mean
            .iter()
            .chain(&n.input_std)
            .chain(&n.target_std)
            .chain(&n.accel_std)
            .chain(&self.conditioning)
        {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.named_params() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &dim in t.shape() {
                buf.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_weights(path: &Path) -> Result<FlowModel> {
        let mut data = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut data)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
            if *pos + n > data.len() {
                return Err(Error::ModelFormat(format!("truncated file while reading {what}")));
            }
            let s = &data[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let magic = take(&mut pos, 4, "magic")?;
        if magic != WEIGHTS_MAGIC {
            return Err(Error::ModelFormat("bad magic bytes".into()));
        }
        let get_u32 = |pos: &mut usize, what: &str| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4, what)?.try_into().unwrap()))
        };
        let get_u64 = |pos: &mut usize, what: &str| -> Result<u64> {
            Ok(u64::from_le_bytes(take(pos, 8, what)?.try_into().unwrap()))
        };
        let get_f64 = |pos: &mut usize, what: &str| -> Result<f64> {
            Ok(f64::from_le_bytes(take(pos, 8, what)?.try_into().unwrap()))
        };
        let version = get_u32(&mut pos, "version")?;
        if version != WEIGHTS_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported version {version}, expected {WEIGHTS_VERSION}"
            )));
        }
        let coupling_layers = get_u32(&mut pos, "config")? as usize;
        let hidden_layers = get_u32(&mut pos, "config")? as usize;
        let hidden_units = get_u32(&mut pos, "config")? as usize;
        let steps = get_u32(&mut pos, "config")? as usize;
        let token_dim = get_u32(&mut pos, "config")? as usize;
        let head = Head::from_tag(take(&mut pos, 1, "head")?[0])?;
        let scale_clamp = get_f64(&mut pos, "config")?;
        let seed = get_u64(&mut pos, "config")?;
        let config = ModelConfig {
            coupling_layers,
            hidden_layers,
            hidden_units,
            steps,
            head,
            token_dim,
            scale_clamp,
            seed,
        };
        let mut input_mean = [0.0; 12];
        let mut input_std = [0.0; 12];
        let mut target_std = [0.0; 3];
        let mut accel_std = [0.0; 3];
        for v in input_mean.iter_mut().chain(&mut input_std) {
            *v = get_f64(&mut pos, "normalization")?;
        }
        for v in target_std.iter_mut().chain(&mut accel_std) {
            *v = get_f64(&mut pos, "normalization")?;
        }
        let normalization = Normalization {
            input_mean,
            input_std,
            target_std,
            accel_std,
        };
        let mut conditioning = [0.0; COND_WIDTH];
        for v in &mut conditioning {
            *v = get_f64(&mut pos, "conditioning")?;
        }

        // expected layout from the stored config
        let mut expected = FlowModel::new(config, normalization, conditioning)?;
        let count = get_u32(&mut pos, "param count")? as usize;
        if count != expected.tensors.len() {
            return Err(Error::ModelFormat(format!(
                "file has {count} parameters, config implies {}",
                expected.tensors.len()
            )));
        }
        for i in 0..count {
            let name_len = get_u32(&mut pos, "param name")? as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len, "param name")?)
                .map_err(|_| Error::ModelFormat("parameter name is not utf-8".into()))?
                .to_string();
            if name != expected.names[i] {
                return Err(Error::ModelFormat(format!(
                    "parameter {i} named {name}, expected {}",
                    expected.names[i]
                )));
            }
            let rank = get_u32(&mut pos, "param rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(get_u64(&mut pos, "param shape")? as usize);
            }
            if shape != expected.tensors[i].shape() {
                return Err(Error::ModelFormat(format!(
                    "parameter {name} has shape {shape:?}, expected {:?}",
                    expected.tensors[i].shape()
                )));
            }
            let numel: usize = shape.iter().product();
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                values.push(get_f64(&mut pos, "param data")?);
            }
            expected.tensors[i] = Tensor::new(shape, values)?;
        }
        if pos != data.len() {
            return Err(Error::ModelFormat("trailing bytes after parameter table".into()));
        }
        Ok(expected)
    }
}
