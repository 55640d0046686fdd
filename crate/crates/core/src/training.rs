//! Hybrid data-driven + physics-residual training.
//!
//! The data loss is the per-axis normalized RMSE of the predicted rate
//! changes over the `S`-step window. The physics loss rolls the predictions
//! forward under constant torque and penalizes (a) the normalized RMSE
//! between the implied angular accelerations and the rigid-body equations
//! evaluated at the rolled-out states with zero external torque, and (b) the
//! squared mismatch of total angular-momentum magnitude against the
//! ground-truth rollout. The two losses combine as `α·L_dd + β·L_pi`, with
//! the weights either fixed or adapted once per epoch by a clipped
//! sub-gradient step on the validation losses (`β ← β + η(L_pi − L_dd)`,
//! `α = 1 − β`, `β ∈ [0, 0.5]`).

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::autodiff::{cross3_rows, Tape, Var};
use crate::dataset::{Dataset, TrainingSample};
use crate::dynamics::{angular_acceleration, SpacecraftParams};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, ModelVars};
use crate::math::Vec3;
use crate::optim::{adam_step, OptimizerState};
use crate::tensor::Tensor;

/// How the two loss terms are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Fixed,
    LagrangianDual,
}

/// Weights of the combined objective, including the momentum-term factor `p`
/// inside the physics loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    /// Weight of the momentum-magnitude term inside the physics loss.
    pub momentum_weight: f64,
    pub mode: LossMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::lagrangian_dual()
    }
}

impl LossWeights {
    pub fn fixed(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            momentum_weight: 1e-2,
            mode: LossMode::Fixed,
        }
    }

    /// Pure data-driven objective.
    pub fn data_driven_only() -> Self {
        Self::fixed(1.0, 0.0)
    }

    /// Dual-weighted objective starting from equal weights.
    pub fn lagrangian_dual() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            momentum_weight: 1e-2,
            mode: LossMode::LagrangianDual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.momentum_weight <= 0.0 {
            return Err(Error::InvalidConfig("momentum weight must be positive".into()));
        }
        match self.mode {
            LossMode::Fixed => {
                if self.alpha < 0.0 || self.beta < 0.0 {
                    return Err(Error::InvalidConfig("fixed weights must be non-negative".into()));
                }
            }
            LossMode::LagrangianDual => {
                if !(0.0..=0.5).contains(&self.beta) {
                    return Err(Error::InvalidConfig(
                        "dual-mode beta must lie in [0, 0.5]".into(),
                    ));
                }
                if (self.alpha + self.beta - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidConfig(
                        "dual-mode weights must satisfy alpha = 1 - beta".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One clipped sub-gradient step on the dual weight:
/// `β ← clip(β + η·(L_pi − L_dd), 0, 0.5)`, `α = 1 − β`.
pub fn lagrangian_update(
    w: &LossWeights,
    data_loss: f64,
    physics_loss: f64,
    eta: f64,
) -> Result<LossWeights> {
    if w.mode != LossMode::LagrangianDual {
        return Err(Error::InvalidArgument(
            "dual update called on fixed-weight configuration".into(),
        ));
    }
    let beta = (w.beta + eta * (physics_loss - data_loss)).clamp(0.0, 0.5);
    Ok(LossWeights {
        alpha: 1.0 - beta,
        beta,
        ..*w
    })
}

/// Combined objective `α·L_dd + β·L_pi`.
pub fn total_loss(data_loss: f64, physics_loss: f64, w: &LossWeights) -> f64 {
    w.alpha * data_loss + w.beta * physics_loss
}

fn check_sigma(sigma: &[f64; 3]) -> Result<()> {
    if sigma.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "normalization stds must be positive, got {sigma:?}"
        )));
    }
    Ok(())
}

/// Per-axis normalized RMSE of the window predictions.
///
/// `pred` and `target` are `[B, S*3]` in raw units; each axis RMSE over
/// batch and steps is divided by that axis' std, then averaged across axes.
pub fn loss_data_driven(pred: &Tensor, target: &Tensor, sigma: &[f64; 3]) -> Result<f64> {
    check_sigma(sigma)?;
    if pred.shape() != target.shape() || pred.rank() != 2 || pred.cols2() % 3 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "window predictions {:?} vs targets {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut sse = [0.0; 3];
    let cols = pred.cols2();
    for r in 0..pred.rows2() {
        for c in 0..cols {
            let d = pred.data()[r * cols + c] - target.data()[r * cols + c];
            sse[c % 3] += d * d;
        }
    }
    let n = (pred.numel() / 3) as f64;
    let mut loss = 0.0;
    for a in 0..3 {
        loss += (sse[a] / n).sqrt() / sigma[a];
    }
    Ok(loss / 3.0)
}

/// One rolled-out step: body rate, wheel rate, and implied acceleration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolledState {
    pub omega: Vec3,
    pub omega_rw: Vec3,
    pub omega_dot: Vec3,
}

/// Roll the predicted rate changes forward from a sample under constant
/// torque: `ω̂_{k+1} = ω̂_k + Δω̂_k`, `ω̂̇_{k+1} = Δω̂_k/Δt`,
/// `ω̂_rw,{k+1} = ω̂_rw,k + (I_rw⁻¹·u − ω̂̇_{k+1})·Δt`.
/// Returns the states for `k = 1..=S`.
pub fn rollout_predicted(
    p: &SpacecraftParams,
    start: &TrainingSample,
    pred: &[[f64; 3]],
) -> Vec<RolledState> {
    let dt = p.control_dt;
    let u = start.torque();
    let inv = p.wheel_inv_diag();
    let wheel_drive = Vec3::new(inv.x * u.x, inv.y * u.y, inv.z * u.z) * dt;
    let mut omega = start.omega();
    let mut omega_rw = start.omega_rw();
    let mut out = Vec::with_capacity(pred.len());
    for step in pred {
        let delta = Vec3::from_array(*step);
        let omega_dot = delta * (1.0 / dt);
        omega = omega + delta;
        omega_rw = omega_rw + wheel_drive - delta;
        out.push(RolledState {
            omega,
            omega_rw,
            omega_dot,
        });
    }
    out
}

/// Accumulate the squared physics residuals of one sample into per-axis
/// acceleration SSE and a momentum-magnitude SSE. Returns the step count.
fn accumulate_physics_sse(
    p: &SpacecraftParams,
    sample: &TrainingSample,
    pred: &[[f64; 3]],
    sse_accel: &mut [f64; 3],
    sse_momentum: &mut f64,
) -> usize {
    let dt = p.control_dt;
    let u = sample.torque();
    let inv = p.wheel_inv_diag();
    let wheel_drive = Vec3::new(inv.x * u.x, inv.y * u.y, inv.z * u.z) * dt;

    let mut omega_hat = sample.omega();
    let mut omega_rw_hat = sample.omega_rw();
    let mut omega_true = sample.omega();
    let mut omega_rw_true = sample.omega_rw();

    for (k, step) in pred.iter().enumerate() {
        let delta_hat = Vec3::from_array(*step);
        // acceleration residual at the pre-step state, zero external torque
        let accel_phys = angular_acceleration(p, omega_hat, omega_rw_hat, u, Vec3::zero());
        let accel_hat = delta_hat * (1.0 / dt);
        let r = accel_hat - accel_phys;
        sse_accel[0] += r.x * r.x;
        sse_accel[1] += r.y * r.y;
        sse_accel[2] += r.z * r.z;

        omega_hat = omega_hat + delta_hat;
        omega_rw_hat = omega_rw_hat + wheel_drive - delta_hat;

        let delta_true = Vec3::from_array(sample.multi_targets[k]);
        omega_true = omega_true + delta_true;
        omega_rw_true = omega_rw_true + wheel_drive - delta_true;

        let h_hat = (p.inertia_body.mul_vec(omega_hat)
            + p.inertia_wheels.mul_vec(omega_rw_hat))
        .norm();
        let h_true = (p.inertia_body.mul_vec(omega_true)
            + p.inertia_wheels.mul_vec(omega_rw_true))
        .norm();
        let dh = h_hat - h_true;
        *sse_momentum += dh * dh;
    }
    pred.len()
}

/// The two components of the physics-residual loss of one sample's window:
/// the normalized acceleration-residual RMSE and the raw momentum-magnitude
/// MSE (not yet weighted by `p`).
pub fn loss_physics_parts(
    p: &SpacecraftParams,
    sample: &TrainingSample,
    pred: &[[f64; 3]],
    sigma_wdot: &[f64; 3],
) -> Result<(f64, f64)> {
    check_sigma(sigma_wdot)?;
    if pred.len() != sample.multi_targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction window of {} steps, sample has {}",
            pred.len(),
            sample.multi_targets.len()
        )));
    }
    let mut sse_accel = [0.0; 3];
    let mut sse_momentum = 0.0;
    let n = accumulate_physics_sse(p, sample, pred, &mut sse_accel, &mut sse_momentum) as f64;
    let mut accel_term = 0.0;
    for a in 0..3 {
        accel_term += (sse_accel[a] / n).sqrt() / sigma_wdot[a];
    }
    accel_term /= 3.0;
    Ok((accel_term, sse_momentum / n))
}

/// Physics-residual loss of one sample's window:
/// `L_pi = L_ω̇ + p·L_h` with the acceleration term normalized per axis by
/// `sigma_wdot` and the momentum term a plain MSE.
pub fn loss_physics(
    p: &SpacecraftParams,
    sample: &TrainingSample,
    pred: &[[f64; 3]],
    sigma_wdot: &[f64; 3],
    weights: &LossWeights,
) -> Result<f64> {
    let (accel_term, momentum_mse) = loss_physics_parts(p, sample, pred, sigma_wdot)?;
    Ok(accel_term + weights.momentum_weight * momentum_mse)
}

/// Training-loop configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Sub-gradient step size for the dual update.
    pub dual_step: f64,
    /// Learning-rate multiplier applied every `lr_decay_every` epochs
    /// (1.0 disables the schedule).
    pub lr_decay: f64,
    /// Epoch interval of the decay schedule (0 disables it).
    pub lr_decay_every: usize,
    /// Print one progress line per epoch to stderr.
    pub progress: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16384,
            max_epochs: 300,
            patience: 40,
            validation_fraction: 0.1,
            learning_rate: 1e-3,
            seed: 0,
            weights: LossWeights::default(),
            dual_step: 1e-2,
            lr_decay: 1.0,
            lr_decay_every: 0,
            progress: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::InvalidConfig("need at least one epoch".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) || self.validation_fraction <= 0.0 {
            return Err(Error::InvalidConfig(
                "validation fraction must lie in (0, 1)".into(),
            ));
        }
        if self.learning_rate <= 0.0 || self.dual_step <= 0.0 {
            return Err(Error::InvalidConfig("step sizes must be positive".into()));
        }
        if self.lr_decay <= 0.0 || self.lr_decay > 1.0 {
            return Err(Error::InvalidConfig("lr decay must lie in (0, 1]".into()));
        }
        self.weights.validate()
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_data_loss: f64,
    pub train_physics_loss: f64,
    /// Physics weight in effect during this epoch.
    pub beta: f64,
    pub val_data_loss: f64,
    pub val_physics_loss: f64,
    pub val_total_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub total_wall_time_s: f64,
}

impl TrainReport {
    /// CSV export. Wall time is deliberately not a column so reruns with the
    /// same seed produce byte-identical files.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "epoch,l_dd,l_pi,beta,val_l_dd,val_l_pi,val_total")?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{:?},{:?},{:?},{:?},{:?},{:?}",
                e.epoch,
                e.train_data_loss,
                e.train_physics_loss,
                e.beta,
                e.val_data_loss,
                e.val_physics_loss,
                e.val_total_loss
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Precomputed per-sample constants used by the batched loss graph.
struct Precomputed {
    input_norm: Vec<f64>,
    target_norm: Vec<f64>,
    omega0: Vec<f64>,
    omega_rw0: Vec<f64>,
    torque: Vec<f64>,
    /// `I_rw⁻¹·u·Δt` per sample.
    wheel_drive: Vec<f64>,
    /// Ground-truth momentum magnitudes along the window, `[N, S]`.
    h_true: Vec<f64>,
    steps: usize,
}

fn precompute(dataset: &Dataset) -> Precomputed {
    let n = dataset.samples.len();
    let s = dataset.steps;
    let p = &dataset.params;
    let dt = p.control_dt;
    let inv = p.wheel_inv_diag();
    let norm = &dataset.normalization;

    let mut pre = Precomputed {
        input_norm: Vec::with_capacity(n * 12),
        target_norm: Vec::with_capacity(n * s * 3),
        omega0: Vec::with_capacity(n * 3),
        omega_rw0: Vec::with_capacity(n * 3),
        torque: Vec::with_capacity(n * 3),
        wheel_drive: Vec::with_capacity(n * 3),
        h_true: Vec::with_capacity(n * s),
        steps: s,
    };
    for sample in &dataset.samples {
        pre.input_norm.extend_from_slice(&norm.normalize_input(&sample.input));
        for row in &sample.multi_targets {
            for a in 0..3 {
                pre.target_norm.push(row[a] / norm.target_std[a]);
            }
        }
        let omega = sample.omega();
        let omega_rw = sample.omega_rw();
        let u = sample.torque();
        pre.omega0.extend_from_slice(&omega.to_array());
        pre.omega_rw0.extend_from_slice(&omega_rw.to_array());
        pre.torque.extend_from_slice(&u.to_array());
        let drive = Vec3::new(inv.x * u.x, inv.y * u.y, inv.z * u.z) * dt;
        pre.wheel_drive.extend_from_slice(&drive.to_array());
        let mut omega_true = omega;
        let mut omega_rw_true = omega_rw;
        for row in &sample.multi_targets {
            let d = Vec3::from_array(*row);
            omega_true = omega_true + d;
            omega_rw_true = omega_rw_true + drive - d;
            pre.h_true.push(
                (p.inertia_body.mul_vec(omega_true) + p.inertia_wheels.mul_vec(omega_rw_true))
                    .norm(),
            );
        }
    }
    pre
}

struct BatchData {
    input_norm: Tensor,
    target_norm: Tensor,
    omega0: Tensor,
    omega_rw0: Tensor,
    torque: Tensor,
    wheel_drive: Tensor,
    /// `[B, S]`
    h_true: Tensor,
}

fn gather_rows(src: &[f64], width: usize, idx: &[usize]) -> Tensor {
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        out.extend_from_slice(&src[i * width..(i + 1) * width]);
    }
    Tensor::new(vec![idx.len(), width], out).expect("gather shape")
}

fn gather_batch(pre: &Precomputed, idx: &[usize]) -> BatchData {
    BatchData {
        input_norm: gather_rows(&pre.input_norm, 12, idx),
        target_norm: gather_rows(&pre.target_norm, pre.steps * 3, idx),
        omega0: gather_rows(&pre.omega0, 3, idx),
        omega_rw0: gather_rows(&pre.omega_rw0, 3, idx),
        torque: gather_rows(&pre.torque, 3, idx),
        wheel_drive: gather_rows(&pre.wheel_drive, 3, idx),
        h_true: gather_rows(&pre.h_true, pre.steps, idx),
    }
}

/// Per-axis normalized RMSE of `[B, S*3]` residuals as a graph.
fn nrmse_graph(tape: &mut Tape, residual: Var, sigma: &[f64; 3]) -> Result<Var> {
    let rows = tape.value(residual).rows2();
    let cols = tape.value(residual).cols2();
    let flat = tape.reshape(residual, vec![rows * cols / 3, 3])?;
    let mut acc: Option<Var> = None;
    for a in 0..3 {
        let axis = tape.slice_cols(flat, a, a + 1)?;
        let sq = tape.square(axis);
        let mse = tape.mean_all(sq);
        let rmse = tape.sqrt(mse);
        let scaled = tape.scale(rmse, 1.0 / sigma[a]);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, scaled)?,
            None => scaled,
        });
    }
    Ok(tape.scale(acc.unwrap(), 1.0 / 3.0))
}

/// Build both loss terms of a batch on the tape. `out_norm` is the model
/// output `[B, S*3]` in normalized units.
fn build_losses(
    tape: &mut Tape,
    params: &SpacecraftParams,
    batch: &BatchData,
    out_norm: Var,
    sigma_dw: &[f64; 3],
    sigma_wdot: &[f64; 3],
    momentum_weight: f64,
) -> Result<(Var, Var)> {
    let b = tape.value(out_norm).rows2();
    let s = batch.h_true.cols2();

    // data term in normalized units
    let target = tape.constant(batch.target_norm.clone());
    let diff = tape.sub(out_norm, target)?;
    let unit = [1.0; 3];
    let l_dd = nrmse_graph(tape, diff, &unit)?;

    // de-normalize for the physics rollout
    let sigma_tiled: Vec<f64> = (0..s * 3).map(|c| sigma_dw[c % 3]).collect();
    let sigma_const = tape.constant(Tensor::tile_rows(b, &sigma_tiled));
    let out_raw = tape.mul(out_norm, sigma_const)?;

    let dt = params.control_dt;
    let is_t = tape.constant(Tensor::from_slice_2d(3, 3, &params.inertia_body.transpose().m)?);
    let irw_t = tape.constant(Tensor::from_slice_2d(
        3,
        3,
        &params.inertia_wheels.transpose().m,
    )?);
    let minv_t = tape.constant(Tensor::from_slice_2d(
        3,
        3,
        &params.body_minus_wheels_inv().transpose().m,
    )?);

    let torque = tape.constant(batch.torque.clone());
    let wheel_drive = tape.constant(batch.wheel_drive.clone());
    let mut omega_hat = tape.constant(batch.omega0.clone());
    let mut omega_rw_hat = tape.constant(batch.omega_rw0.clone());

    let mut accel_residuals = Vec::with_capacity(s);
    let mut momentum_residuals = Vec::with_capacity(s);
    for k in 0..s {
        let pred_k = tape.slice_cols(out_raw, k * 3, k * 3 + 3)?;
        // physics acceleration at the pre-step state, N_e = 0
        let body_mom = tape.matmul(omega_hat, is_t)?;
        let wheel_mom = tape.matmul(omega_rw_hat, irw_t)?;
        let momentum = tape.add(body_mom, wheel_mom)?;
        let gyro = cross3_rows(tape, omega_hat, momentum)?;
        let forcing = tape.add(gyro, torque)?;
        let rhs = tape.neg(forcing);
        let accel_phys = tape.matmul(rhs, minv_t)?;
        let accel_hat = tape.scale(pred_k, 1.0 / dt);
        accel_residuals.push(tape.sub(accel_hat, accel_phys)?);

        // advance the predicted rollout
        omega_hat = tape.add(omega_hat, pred_k)?;
        let drift = tape.sub(wheel_drive, pred_k)?;
        omega_rw_hat = tape.add(omega_rw_hat, drift)?;

        let body_mom_next = tape.matmul(omega_hat, is_t)?;
        let wheel_mom_next = tape.matmul(omega_rw_hat, irw_t)?;
        let momentum_next = tape.add(body_mom_next, wheel_mom_next)?;
        let h_hat = tape.row_norms(momentum_next)?;
        let h_true_k = tape_const_col(tape, &batch.h_true, k)?;
        momentum_residuals.push(tape.sub(h_hat, h_true_k)?);
    }

    let accel_stack = tape.concat_cols(&accel_residuals)?;
    let l_accel = nrmse_graph(tape, accel_stack, sigma_wdot)?;
    let h_stack = tape.concat_cols(&momentum_residuals)?;
    let h_sq = tape.square(h_stack);
    let l_h = tape.mean_all(h_sq);
    let l_h_weighted = tape.scale(l_h, momentum_weight);
    let l_pi = tape.add(l_accel, l_h_weighted)?;
    Ok((l_dd, l_pi))
}

fn tape_const_col(tape: &mut Tape, data: &Tensor, col: usize) -> Result<Var> {
    let rows = data.rows2();
    let cols = data.cols2();
    let mut out = Vec::with_capacity(rows);
    for i in 0..rows {
        out.push(data.data()[i * cols + col]);
    }
    Ok(tape.constant(Tensor::new(vec![rows, 1], out)?))
}

/// Whole-set loss evaluation with batch-mean semantics (per-axis SSEs
/// accumulated across chunks before the final square roots).
pub fn evaluate_losses(
    model: &FlowModel,
    dataset: &Dataset,
    indices: &[usize],
    weights: &LossWeights,
    chunk: usize,
) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let norm = &dataset.normalization;
    check_sigma(&norm.target_std)?;
    check_sigma(&norm.accel_std)?;
    let cond_fixed = model.conditioning;

    let mut sse_dd = [0.0; 3];
    let mut sse_accel = [0.0; 3];
    let mut sse_momentum = 0.0;
    let mut count = 0usize;

    for chunk_idx in indices.chunks(chunk.max(1)) {
        let mut input = Vec::with_capacity(chunk_idx.len() * 12);
        for &i in chunk_idx {
            input.extend_from_slice(&norm.normalize_input(&dataset.samples[i].input));
        }
        let input = Tensor::new(vec![chunk_idx.len(), 12], input)?;
        let out = model.forward(&input, &cond_fixed)?;
        for (row, &i) in chunk_idx.iter().enumerate() {
            let sample = &dataset.samples[i];
            let s = dataset.steps;
            let mut pred = Vec::with_capacity(s);
            for k in 0..s {
                let mut raw = [0.0; 3];
                for a in 0..3 {
                    let v = out.data()[row * s * 3 + k * 3 + a];
                    raw[a] = v * norm.target_std[a];
                    let d = raw[a] - sample.multi_targets[k][a];
                    sse_dd[a] += d * d;
                }
                pred.push(raw);
            }
            count += accumulate_physics_sse(
                &dataset.params,
                sample,
                &pred,
                &mut sse_accel,
                &mut sse_momentum,
            );
        }
    }

    let n = count as f64;
    let mut l_dd = 0.0;
    let mut l_accel = 0.0;
    for a in 0..3 {
        l_dd += (sse_dd[a] / n).sqrt() / norm.target_std[a];
        l_accel += (sse_accel[a] / n).sqrt() / norm.accel_std[a];
    }
    l_dd /= 3.0;
    l_accel /= 3.0;
    let l_pi = l_accel + weights.momentum_weight * (sse_momentum / n);
    Ok((l_dd, l_pi))
}

/// Train a model on a dataset: shuffled mini-batches, combined loss backward,
/// adaptive-moment updates, per-epoch dual update and validation, early
/// stopping on the validation total, best-validation weights returned.
/// Deterministic for a fixed seed.
pub fn fit(model: FlowModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<(FlowModel, TrainReport)> {
    cfg.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if model.config.steps != dataset.steps {
        return Err(Error::InvalidConfig(format!(
            "model predicts {} steps, dataset windows have {}",
            model.config.steps, dataset.steps
        )));
    }
    let mut model = model;
    let started = Instant::now();

    // split by run when possible so overlapping windows cannot leak
    let n = dataset.samples.len();
    let (train_idx, val_idx): (Vec<usize>, Vec<usize>) = if dataset.run_sizes.len() >= 2 {
        let n_runs = dataset.run_sizes.len();
        let val_runs = ((cfg.validation_fraction * n_runs as f64).round() as usize)
            .clamp(1, n_runs - 1);
        let split_run = n_runs - val_runs;
        let split_at: usize = dataset.run_sizes[..split_run].iter().sum();
        ((0..split_at).collect(), (split_at..n).collect())
    } else {
        let val = ((cfg.validation_fraction * n as f64).round() as usize).clamp(1, n - 1);
        ((0..n - val).collect(), (n - val..n).collect())
    };

    let pre = precompute(dataset);
    let cond = model.conditioning;
    let sigma_dw = dataset.normalization.target_std;
    let sigma_wdot = dataset.normalization.accel_std;

    let mut weights = cfg.weights;
    weights.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(model.params(), cfg.learning_rate);

    let mut report = TrainReport::default();
    let mut best_val = f64::INFINITY;
    let mut best_params: Vec<Tensor> = model.params().to_vec();
    let mut best_epoch = 0usize;
    let mut stale = 0usize;

    let mut order = train_idx.clone();
    for epoch in 0..cfg.max_epochs {
        let epoch_start = Instant::now();
        if cfg.lr_decay_every > 0 && epoch > 0 && epoch % cfg.lr_decay_every == 0 {
            opt.learning_rate *= cfg.lr_decay;
        }
        order.shuffle(&mut rng);

        let mut train_dd = 0.0;
        let mut train_pi = 0.0;
        let mut seen = 0usize;
        for (batch_no, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = gather_batch(&pre, idx);
            let mut tape = Tape::new();
            let vars: ModelVars = model.bind(&mut tape, true);
            let input = tape.constant(batch.input_norm.clone());
            let out_norm = model.forward_graph(&mut tape, &vars, input, &cond)?;
            let (l_dd, l_pi) = build_losses(
                &mut tape,
                &dataset.params,
                &batch,
                out_norm,
                &sigma_dw,
                &sigma_wdot,
                weights.momentum_weight,
            )?;
            let a_term = tape.scale(l_dd, weights.alpha);
            let b_term = tape.scale(l_pi, weights.beta);
            let total = tape.add(a_term, b_term)?;

            let dd_val = tape.value(l_dd).item()?;
            let pi_val = tape.value(l_pi).item()?;
            let total_val = tape.value(total).item()?;
            if !total_val.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_no} \
                     (l_dd={dd_val}, l_pi={pi_val})"
                )));
            }
            train_dd += dd_val * idx.len() as f64;
            train_pi += pi_val * idx.len() as f64;
            seen += idx.len();

            let grads_out = tape.backward(total)?;
            let grads: Vec<Tensor> = vars
                .handles()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    grads_out
                        .get(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(model.params()[i].shape().to_vec()))
                })
                .collect();
            adam_step(model.params_mut(), &grads, &mut opt)?;
        }
        train_dd /= seen as f64;
        train_pi /= seen as f64;

        let (val_dd, val_pi) =
            evaluate_losses(&model, dataset, &val_idx, &weights, cfg.batch_size)?;
        let val_total = total_loss(val_dd, val_pi, &weights);

        report.epochs.push(EpochStats {
            epoch,
            train_data_loss: train_dd,
            train_physics_loss: train_pi,
            beta: weights.beta,
            val_data_loss: val_dd,
            val_physics_loss: val_pi,
            val_total_loss: val_total,
            wall_time_s: epoch_start.elapsed().as_secs_f64(),
        });
        if cfg.progress {
            eprintln!(
                "epoch {epoch}: train dd {train_dd:.5} pi {train_pi:.5} | \
                 val dd {val_dd:.5} pi {val_pi:.5} total {val_total:.5} | beta {:.3}",
                weights.beta
            );
        }

        if val_total < best_val {
            best_val = val_total;
            best_params = model.params().to_vec();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }

        if weights.mode == LossMode::LagrangianDual {
            weights = lagrangian_update(&weights, val_dd, val_pi, cfg.dual_step)?;
        }
    }

    for (p, best) in model.params_mut().iter_mut().zip(best_params) {
        *p = best;
    }
    report.best_epoch = best_epoch;
    report.total_wall_time_s = started.elapsed().as_secs_f64();
    Ok((model, report))
}
