//! Metrics and experiment harnesses: regression error (single-step and
//! self-loop), control performance error series, noise-robustness Monte
//! Carlo, and a paired signed-rank significance test.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::dataset::{conditioning, Dataset};
use crate::dynamics::{BodyState, SpacecraftParams};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, COND_WIDTH};
use crate::math::{Quaternion, Vec3};
use crate::mpc::{closed_loop, ClosedLoopConfig, ClosedLoopRun, MpcConfig, MpcModel};
use crate::sim::Trajectory;
use crate::tensor::Tensor;
use crate::training::{loss_physics, LossWeights};

const MRE_EPS: f64 = 1e-12;

/// Mean relative error in percent: `mean |pred − truth| / (|truth| + ε) × 100`
/// over flat, equally shaped slices.
pub fn mre(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "mre needs equal non-empty inputs, got {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        acc += (p - t).abs() / (t.abs() + MRE_EPS);
    }
    Ok(acc / pred.len() as f64 * 100.0)
}

/// Alternative norm-ratio form: `mean ‖pred − truth‖ / (‖truth‖ + ε) × 100`
/// over 3-vectors.
pub fn mre_norm_ratio(pred: &[[f64; 3]], truth: &[[f64; 3]]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::InvalidArgument("mre needs equal non-empty inputs".into()));
    }
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        let pv = Vec3::from_array(*p);
        let tv = Vec3::from_array(*t);
        acc += (pv - tv).norm() / (tv.norm() + MRE_EPS);
    }
    Ok(acc / pred.len() as f64 * 100.0)
}

/// A one-step rate-change predictor operating on the raw 12-d input.
pub trait StepPredictor: Sync {
    fn predict_delta_raw(&self, input_raw: &[f64; 12]) -> Result<[f64; 3]>;
}

/// A flow model paired with the inertia conditioning it should be fed.
pub struct ConditionedModel<'a> {
    pub model: &'a FlowModel,
    pub cond: [f64; COND_WIDTH],
}

impl<'a> ConditionedModel<'a> {
    pub fn new(model: &'a FlowModel, believed: &SpacecraftParams) -> Self {
        let mut cond = [0.0; COND_WIDTH];
        cond.copy_from_slice(&conditioning(believed));
        Self { model, cond }
    }

    /// Condition on the spacecraft the model was trained for.
    pub fn stored(model: &'a FlowModel) -> Self {
        Self {
            model,
            cond: model.conditioning,
        }
    }
}

impl StepPredictor for ConditionedModel<'_> {
    fn predict_delta_raw(&self, input_raw: &[f64; 12]) -> Result<[f64; 3]> {
        let norm_in = self.model.normalization.normalize_input(input_raw);
        let out = self.model.forward(&Tensor::row(&norm_in), &self.cond)?;
        Ok(self
            .model
            .normalization
            .denormalize_target([out.data()[0], out.data()[1], out.data()[2]]))
    }
}

/// Regression-quality summary over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionMetrics {
    /// Single-step mean relative error, percent.
    pub mre_single: f64,
    /// Physics loss of the single-step predictions (batch semantics).
    pub physics_single: f64,
    /// Self-loop mean relative error over the feedback rollout, percent.
    pub mre_selfloop: f64,
    /// Mean per-window physics loss of the self-loop rollout.
    pub physics_selfloop: f64,
    /// Per-window self-loop MRE values, for paired significance testing.
    pub per_window_mre: Vec<f64>,
    /// Per-window self-loop physics losses.
    pub per_window_physics: Vec<f64>,
}

/// Evaluate a predictor on every window of a dataset: single-step error and
/// the `steps`-long self-loop rollout in which the predicted rate change is
/// fed back (wheel rates and the acceleration input rolled accordingly,
/// torque held at the window's initial command).
pub fn self_loop_eval(
    predictor: &impl StepPredictor,
    dataset: &Dataset,
    steps: usize,
    weights: &LossWeights,
) -> Result<RegressionMetrics> {
    if steps < 1 || steps > dataset.steps {
        return Err(Error::InvalidArgument(format!(
            "self-loop of {steps} steps needs windows of at least that length (have {})",
            dataset.steps
        )));
    }
    if dataset.samples.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let p = &dataset.params;
    let dt = p.control_dt;
    let sigma_wdot = dataset.normalization.accel_std;

    struct WindowResult {
        single_abs_rel: f64,
        single_pred: [f64; 3],
        selfloop_mre: f64,
        selfloop_physics: f64,
        preds: Vec<[f64; 3]>,
    }

    let windows: Vec<Result<WindowResult>> = dataset
        .samples
        .par_iter()
        .map(|sample| {
            let single_pred = predictor.predict_delta_raw(&sample.input)?;
            let mut single_abs_rel = 0.0;
            for a in 0..3 {
                single_abs_rel += (single_pred[a] - sample.target[a]).abs()
                    / (sample.target[a].abs() + MRE_EPS);
            }
            single_abs_rel /= 3.0;

            // feedback rollout with the torque held constant
            let u = sample.torque();
            let inv = p.wheel_inv_diag();
            let drive = Vec3::new(inv.x * u.x, inv.y * u.y, inv.z * u.z) * dt;
            let mut omega = sample.omega();
            let mut omega_rw = sample.omega_rw();
            let mut omega_dot = sample.omega_dot();
            let mut preds = Vec::with_capacity(steps);
            let mut rel_acc = 0.0;
            for k in 0..steps {
                let input = [
                    omega.x, omega.y, omega.z, omega_rw.x, omega_rw.y, omega_rw.z, u.x, u.y,
                    u.z, omega_dot.x, omega_dot.y, omega_dot.z,
                ];
                let delta = predictor.predict_delta_raw(&input)?;
                for a in 0..3 {
                    rel_acc += (delta[a] - sample.multi_targets[k][a]).abs()
                        / (sample.multi_targets[k][a].abs() + MRE_EPS);
                }
                preds.push(delta);
                let dv = Vec3::from_array(delta);
                omega = omega + dv;
                omega_dot = dv * (1.0 / dt);
                omega_rw = omega_rw + drive - dv;
            }
            let selfloop_mre = rel_acc / (3 * steps) as f64 * 100.0;
            let selfloop_physics = loss_physics(
                p,
                sample,
                &preds[..],
                &sigma_wdot,
                weights,
            )?;
            Ok(WindowResult {
                single_abs_rel,
                single_pred,
                selfloop_mre,
                selfloop_physics,
                preds,
            })
        })
        .collect();

    let mut mre_single = 0.0;
    let mut sse_accel = [0.0; 3];
    let mut sse_h = 0.0;
    let mut count_single = 0usize;
    let mut mre_selfloop = 0.0;
    let mut physics_selfloop = 0.0;
    let mut per_window_mre = Vec::with_capacity(dataset.samples.len());
    let mut per_window_physics = Vec::with_capacity(dataset.samples.len());

    for (sample, w) in dataset.samples.iter().zip(windows) {
        let w = w?;
        mre_single += w.single_abs_rel;
        count_single += physics_sse_single(p, sample, &w.single_pred, &mut sse_accel, &mut sse_h);
        mre_selfloop += w.selfloop_mre;
        physics_selfloop += w.selfloop_physics;
        per_window_mre.push(w.selfloop_mre);
        per_window_physics.push(w.selfloop_physics);
        let _ = w.preds;
    }
    let n = dataset.samples.len() as f64;
    mre_single = mre_single / n * 100.0;
    mre_selfloop /= n;
    physics_selfloop /= n;

    let mut physics_single = 0.0;
    for a in 0..3 {
        physics_single += (sse_accel[a] / count_single as f64).sqrt() / sigma_wdot[a];
    }
    physics_single = physics_single / 3.0 + weights.momentum_weight * (sse_h / count_single as f64);

    Ok(RegressionMetrics {
        mre_single,
        physics_single,
        mre_selfloop,
        physics_selfloop,
        per_window_mre,
        per_window_physics,
    })
}

/// One-step physics SSE contribution (the `S = 1` special case).
fn physics_sse_single(
    p: &SpacecraftParams,
    sample: &crate::dataset::TrainingSample,
    pred: &[f64; 3],
    sse_accel: &mut [f64; 3],
    sse_h: &mut f64,
) -> usize {
    let dt = p.control_dt;
    let u = sample.torque();
    let inv = p.wheel_inv_diag();
    let drive = Vec3::new(inv.x * u.x, inv.y * u.y, inv.z * u.z) * dt;
    let delta = Vec3::from_array(*pred);
    let accel_phys =
        crate::dynamics::angular_acceleration(p, sample.omega(), sample.omega_rw(), u, Vec3::zero());
    let r = delta * (1.0 / dt) - accel_phys;
    sse_accel[0] += r.x * r.x;
    sse_accel[1] += r.y * r.y;
    sse_accel[2] += r.z * r.z;

    let omega_hat = sample.omega() + delta;
    let omega_rw_hat = sample.omega_rw() + drive - delta;
    let delta_true = Vec3::from_array(sample.multi_targets[0]);
    let omega_true = sample.omega() + delta_true;
    let omega_rw_true = sample.omega_rw() + drive - delta_true;
    let h_hat = (p.inertia_body.mul_vec(omega_hat) + p.inertia_wheels.mul_vec(omega_rw_hat)).norm();
    let h_true =
        (p.inertia_body.mul_vec(omega_true) + p.inertia_wheels.mul_vec(omega_rw_true)).norm();
    *sse_h += (h_hat - h_true) * (h_hat - h_true);
    1
}

/// Instantaneous tracking-error series of a closed-loop trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ApeSeries {
    pub times: Vec<f64>,
    /// Hemisphere-aligned `q_ref − q`, per component.
    pub quat_err: Vec<[f64; 4]>,
    pub quat_err_norm: Vec<f64>,
    pub omega_err: Vec<[f64; 3]>,
    pub wheel_err: Vec<[f64; 3]>,
}

/// Per-step performance error against the attitude reference (rate and wheel
/// references are zero).
pub fn ape(traj: &Trajectory, q_ref: Quaternion) -> ApeSeries {
    let mut out = ApeSeries {
        times: traj.times.clone(),
        quat_err: Vec::with_capacity(traj.len()),
        quat_err_norm: Vec::with_capacity(traj.len()),
        omega_err: Vec::with_capacity(traj.len()),
        wheel_err: Vec::with_capacity(traj.len()),
    };
    for s in &traj.states {
        let q = if s.attitude.dot(q_ref) < 0.0 {
            s.attitude.negated()
        } else {
            s.attitude
        };
        let e = [
            q_ref.q0 - q.q0,
            q_ref.q1 - q.q1,
            q_ref.q2 - q.q2,
            q_ref.q3 - q.q3,
        ];
        out.quat_err_norm
            .push((e[0] * e[0] + e[1] * e[1] + e[2] * e[2] + e[3] * e[3]).sqrt());
        out.quat_err.push(e);
        out.omega_err.push(s.omega.to_array());
        out.wheel_err.push(s.omega_rw.to_array());
    }
    out
}

/// Stability error distribution: per-axis lagged differences of an error
/// series, axis-averaged per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeResult {
    pub values: Vec<f64>,
    pub mean_abs: f64,
}

/// Axis-averaged `APE(t) − APE(t − lag)` restricted to `t_start` onward.
pub fn spe_lagged(axes: &[Vec<f64>], lag: usize, start_index: usize) -> Result<SpeResult> {
    if axes.is_empty() {
        return Err(Error::InvalidArgument("no axes".into()));
    }
    let len = axes[0].len();
    if axes.iter().any(|a| a.len() != len) {
        return Err(Error::InvalidArgument("axis series lengths differ".into()));
    }
    if lag == 0 || len <= lag {
        return Err(Error::InvalidArgument(format!(
            "series of {len} samples too short for lag {lag}"
        )));
    }
    let first = start_index.max(lag);
    let mut values = Vec::with_capacity(len.saturating_sub(first));
    for i in first..len {
        let mut v = 0.0;
        for axis in axes {
            v += axis[i] - axis[i - lag];
        }
        values.push(v / axes.len() as f64);
    }
    if values.is_empty() {
        return Err(Error::InvalidArgument(
            "post-settling window is empty for this series".into(),
        ));
    }
    let mean_abs = values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64;
    Ok(SpeResult { values, mean_abs })
}

/// Time-based wrapper: `delta` and the settling boundary in seconds.
pub fn spe(
    axes: &[Vec<f64>],
    times: &[f64],
    delta_s: f64,
    settle_s: f64,
    control_dt: f64,
) -> Result<SpeResult> {
    if control_dt <= 0.0 || delta_s <= 0.0 {
        return Err(Error::InvalidArgument("times must be positive".into()));
    }
    let lag = (delta_s / control_dt).round() as usize;
    let start_index = times.iter().position(|&t| t > settle_s).unwrap_or(times.len());
    spe_lagged(axes, lag.max(1), start_index)
}

/// Paired signed-rank test result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// `min(W+, W−)` over the non-zero differences.
    pub statistic: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    /// Every difference was zero; `p_value` is reported as 1.
    pub all_zero: bool,
}

/// Two-sided Wilcoxon signed-rank test for paired samples. Zero differences
/// are dropped, ties get mid-ranks, the null distribution is exact for
/// `n ≤ 25` and a tie-corrected normal approximation beyond.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() || a.len() < 5 {
        return Err(Error::InvalidArgument(format!(
            "paired test needs equal lengths of at least 5, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            p_value: 1.0,
            all_zero: true,
        });
    }
    diffs.sort_by(|x, y| x.abs().partial_cmp(&y.abs()).expect("finite differences"));
    let n = diffs.len();

    // mid-ranks over tied absolute values
    let mut ranks = vec![0.0; n];
    let mut tie_correction = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[j + 1].abs() == diffs[i].abs() {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for r in ranks.iter_mut().take(j + 1).skip(i) {
            *r = avg;
        }
        let t = (j - i + 1) as f64;
        tie_correction += t * t * t - t;
        i = j + 1;
    }

    let mut w_plus = 0.0;
    for (d, r) in diffs.iter().zip(&ranks) {
        if *d > 0.0 {
            w_plus += r;
        }
    }
    let total = n as f64 * (n as f64 + 1.0) / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);

    let p_value = if n <= 25 {
        exact_two_sided_p(&ranks, w_plus)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_correction / 48.0;
        if var <= 0.0 {
            1.0
        } else {
            let z = (w_plus - mean) / var.sqrt();
            let normal = NormalDist::new(0.0, 1.0).expect("unit normal");
            (2.0 * normal.cdf(-z.abs())).min(1.0)
        }
    };

    Ok(WilcoxonResult {
        statistic,
        p_value,
        all_zero: false,
    })
}

/// Exact two-sided p by dynamic programming over the doubled ranks (doubling
/// turns mid-ranks into integers).
fn exact_two_sided_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max_sum + 1];
    counts[0] = 1.0;
    let mut reachable = 0usize;
    for &r in &doubled {
        reachable += r;
        for s in (0..=reachable).rev() {
            if s >= r && counts[s - r] > 0.0 {
                counts[s] += counts[s - r];
            }
        }
    }
    let total: f64 = counts.iter().sum();
    let w2 = (2.0 * w_plus).round() as usize;
    let below: f64 = counts[..=w2.min(max_sum)].iter().sum();
    let above: f64 = counts[w2.min(max_sum)..].iter().sum();
    (2.0 * (below.min(above)) / total).min(1.0)
}

/// Aggregates of one observed variable group across noisy runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariableAggregates {
    /// Mean over runs of the time-and-axis mean absolute error.
    pub mae: f64,
    /// Mean over runs of the axis-mean absolute error at the final step.
    pub final_error: f64,
    /// Time-and-axis mean of the cross-run standard deviation.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub noise_free: ClosedLoopRun,
    pub runs: Vec<ClosedLoopRun>,
    pub attitude: VariableAggregates,
    pub angular_velocity: VariableAggregates,
    pub wheel_speed: VariableAggregates,
    pub torque: VariableAggregates,
}

fn truncated_gaussian<R: Rng>(rng: &mut R, normal: &Normal<f64>, bound: f64) -> f64 {
    loop {
        let d = normal.sample(rng);
        if d.abs() <= bound {
            return d;
        }
    }
}

/// How observation noise perturbs a state variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// `x ← x·(1 + δ)`.
    Multiplicative,
    /// `x ← x + δ·s` with `s` the variable group's peak magnitude along the
    /// noise-free reference run.
    AdditiveScaled,
}

/// Error-component series of one run: rows = time, cols = per-group signed
/// error components against the references.
struct ErrorSeries {
    attitude: Vec<[f64; 4]>,
    omega: Vec<[f64; 3]>,
    wheels: Vec<[f64; 3]>,
    torque: Vec<[f64; 3]>,
}

fn error_series(run: &ClosedLoopRun, q_ref: Quaternion) -> ErrorSeries {
    let a = ape(&run.trajectory, q_ref);
    ErrorSeries {
        attitude: a.quat_err,
        omega: a.omega_err,
        wheels: a.wheel_err,
        torque: run.trajectory.torques.iter().map(|u| u.to_array()).collect(),
    }
}

fn aggregates<const W: usize>(series: &[Vec<[f64; W]>]) -> VariableAggregates {
    let runs = series.len() as f64;
    let steps = series[0].len();
    let mut mae = 0.0;
    let mut final_error = 0.0;
    for run in series {
        let mut acc = 0.0;
        for row in run {
            for v in row {
                acc += v.abs();
            }
        }
        mae += acc / (steps * W) as f64;
        let last = &run[steps - 1];
        final_error += last.iter().map(|v| v.abs()).sum::<f64>() / W as f64;
    }
    mae /= runs;
    final_error /= runs;

    let mut spread = 0.0;
    for t in 0..steps {
        for a in 0..W {
            let first = series[0][t][a];
            if series.iter().all(|r| r[t][a] == first) {
                continue;
            }
            let mean: f64 = series.iter().map(|r| r[t][a]).sum::<f64>() / runs;
            let var: f64 = series
                .iter()
                .map(|r| {
                    let d = r[t][a] - mean;
                    d * d
                })
                .sum::<f64>()
                / runs;
            spread += var.sqrt();
        }
    }
    spread /= (steps * W) as f64;
    VariableAggregates {
        mae,
        final_error,
        spread,
    }
}

/// Monte Carlo noise-robustness experiment: `n_runs` closed-loop repetitions
/// with every observed state variable perturbed by `δ ~ N(0, (level/3)²)`
/// re-sampled into `±level` (multiplicative by default), plus one noise-free
/// reference run. Deterministic per seed; runs execute in parallel.
#[allow(clippy::too_many_arguments)]
pub fn robustness_experiment(
    model: &MpcModel<'_>,
    true_params: &SpacecraftParams,
    x0: &BodyState,
    q_ref: Quaternion,
    cl_cfg: &ClosedLoopConfig,
    mpc_cfg: &MpcConfig,
    n_runs: usize,
    noise_level: f64,
    noise_kind: NoiseKind,
    seed: u64,
) -> Result<RobustnessReport> {
    if n_runs < 1 {
        return Err(Error::InvalidArgument("need at least one run".into()));
    }
    if !(0.0..1.0).contains(&noise_level) {
        return Err(Error::InvalidArgument("noise level must lie in [0, 1)".into()));
    }

    let noise_free = closed_loop(model, true_params, x0, q_ref, cl_cfg, mpc_cfg, |s, _| *s)?;

    // peak magnitudes for the additive-noise scale
    let mut omega_scale = 0.0f64;
    let mut wheel_scale = 0.0f64;
    for s in &noise_free.trajectory.states {
        omega_scale = omega_scale.max(s.omega.abs_max());
        wheel_scale = wheel_scale.max(s.omega_rw.abs_max());
    }

    let runs: Vec<Result<ClosedLoopRun>> = (0..n_runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
            if noise_level == 0.0 {
                return closed_loop(model, true_params, x0, q_ref, cl_cfg, mpc_cfg, |s, _| *s);
            }
            let normal = Normal::new(0.0, noise_level / 3.0)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            closed_loop(model, true_params, x0, q_ref, cl_cfg, mpc_cfg, |s, _| {
                let mut d = || truncated_gaussian(&mut rng, &normal, noise_level);
                match noise_kind {
                    NoiseKind::Multiplicative => BodyState {
                        attitude: Quaternion::new(
                            s.attitude.q0 * (1.0 + d()),
                            s.attitude.q1 * (1.0 + d()),
                            s.attitude.q2 * (1.0 + d()),
                            s.attitude.q3 * (1.0 + d()),
                        ),
                        omega: Vec3::new(
                            s.omega.x * (1.0 + d()),
                            s.omega.y * (1.0 + d()),
                            s.omega.z * (1.0 + d()),
                        ),
                        omega_rw: Vec3::new(
                            s.omega_rw.x * (1.0 + d()),
                            s.omega_rw.y * (1.0 + d()),
                            s.omega_rw.z * (1.0 + d()),
                        ),
                        omega_dot: s.omega_dot,
                    },
                    NoiseKind::AdditiveScaled => BodyState {
                        attitude: Quaternion::new(
                            s.attitude.q0 + d(),
                            s.attitude.q1 + d(),
                            s.attitude.q2 + d(),
                            s.attitude.q3 + d(),
                        ),
                        omega: Vec3::new(
                            s.omega.x + d() * omega_scale,
                            s.omega.y + d() * omega_scale,
                            s.omega.z + d() * omega_scale,
                        ),
                        omega_rw: Vec3::new(
                            s.omega_rw.x + d() * wheel_scale,
                            s.omega_rw.y + d() * wheel_scale,
                            s.omega_rw.z + d() * wheel_scale,
                        ),
                        omega_dot: s.omega_dot,
                    },
                }
            })
        })
        .collect();
    let runs: Result<Vec<ClosedLoopRun>> = runs.into_iter().collect();
    let runs = runs?;

    let errors: Vec<ErrorSeries> = runs.iter().map(|r| error_series(r, q_ref)).collect();
    let attitude = aggregates(&errors.iter().map(|e| e.attitude.clone()).collect::<Vec<_>>());
    let angular_velocity = aggregates(&errors.iter().map(|e| e.omega.clone()).collect::<Vec<_>>());
    let wheel_speed = aggregates(&errors.iter().map(|e| e.wheels.clone()).collect::<Vec<_>>());
    let torque = aggregates(&errors.iter().map(|e| e.torque.clone()).collect::<Vec<_>>());

    Ok(RobustnessReport {
        noise_free,
        runs,
        attitude,
        angular_velocity,
        wheel_speed,
        torque,
    })
}

/// Table of regression metrics, one row per experiment.
pub fn write_regression_table(rows: &[(String, RegressionMetrics)], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "experiment,mre,physics,mre_selfloop,physics_selfloop")?;
    for (name, m) in rows {
        writeln!(
            w,
            "{name},{:?},{:?},{:?},{:?}",
            m.mre_single, m.physics_single, m.mre_selfloop, m.physics_selfloop
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Table of robustness aggregates, one row per experiment and variable group.
pub fn write_robustness_table(rows: &[(String, RobustnessReport)], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "experiment_variable,mae,final_error,spread")?;
    for (name, r) in rows {
        for (group, v) in [
            ("attitude", &r.attitude),
            ("angular_velocity", &r.angular_velocity),
            ("wheel_speed", &r.wheel_speed),
            ("torque", &r.torque),
        ] {
            writeln!(
                w,
                "{name} {group},{:?},{:?},{:?}",
                v.mae, v.final_error, v.spread
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-step error series export for external plotting.
pub fn write_ape_csv(series: &ApeSeries, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "time,qe0,qe1,qe2,qe3,qe_norm,we1,we2,we3,wrwe1,wrwe2,wrwe3"
    )?;
    for i in 0..series.times.len() {
        let q = series.quat_err[i];
        let o = series.omega_err[i];
        let r = series.wheel_err[i];
        writeln!(
            w,
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            series.times[i],
            q[0],
            q[1],
            q[2],
            q[3],
            series.quat_err_norm[i],
            o[0],
            o[1],
            o[2],
            r[0],
            r[1],
            r[2]
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_spe_csv(result: &SpeResult, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "spe")?;
    for v in &result.values {
        writeln!(w, "{v:?}")?;
    }
    w.flush()?;
    Ok(())
}

/// Index of produced artifacts, one path per line.
pub fn write_manifest(files: &[PathBuf], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for f in files {
        writeln!(w, "{}", f.display())?;
    }
    w.flush()?;
    Ok(())
}
