//! Nonlinear model-predictive attitude control with a learned (or exact)
//! one-step predictor.
//!
//! The controller optimizes the horizon's torque sequence directly
//! (single shooting): the predicted-state rollout is built on the autodiff
//! tape, the quadratic cost is differentiated with respect to every torque,
//! and a projected adaptive-gradient loop clamps each component to the
//! actuator bound after every iteration. The returned plan is the
//! best-cost iterate, so it never regresses below its warm start.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{cross3_rows, Tape, Var};
use crate::dataset::conditioning;
use crate::dynamics::{self, BodyState, Disturbance, SpacecraftParams};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, COND_WIDTH};
use crate::math::{Quaternion, Vec3};
use crate::optim::{adam_step, OptimizerState};
use crate::sim::Trajectory;
use crate::tensor::Tensor;

/// Controller weights and solver budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Diagonal state weights over `(q, ω, ω_rw, ω̇)`.
    pub state_weights: [f64; 13],
    /// Diagonal torque magnitude weights.
    pub torque_weights: [f64; 3],
    /// Diagonal torque-rate weights.
    pub torque_rate_weights: [f64; 3],
    /// Component-wise actuator bound, N·m.
    pub torque_bound: f64,
    /// The wheel-speed error entries of the state cost act on speeds divided
    /// by this scale, keeping the small default weight a soft desaturation
    /// term. Calibrated once on the reference craft: raw speeds (scale 1)
    /// brake the maneuver into a slow creep, while scales beyond ~2 remove
    /// the damping the term provides and the loop rings.
    pub wheel_speed_scale: f64,
    pub solver_iterations: usize,
    pub solver_step: f64,
    pub control_dt: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            state_weights: [
                1000.0, 1000.0, 1000.0, 1000.0, 1e-2, 1e-2, 1e-2, 1e-4, 1e-4, 1e-4, 1e-2, 1e-2,
                1e-2,
            ],
            torque_weights: [100.0; 3],
            torque_rate_weights: [1.0; 3],
            torque_bound: 0.05,
            wheel_speed_scale: 1.7,
            solver_iterations: 50,
            solver_step: 5e-3,
            control_dt: 0.1,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        if self.torque_bound <= 0.0 {
            return Err(Error::InvalidConfig("torque bound must be positive".into()));
        }
        if self
            .state_weights
            .iter()
            .chain(&self.torque_weights)
            .chain(&self.torque_rate_weights)
            .any(|&w| w < 0.0)
        {
            return Err(Error::InvalidConfig("cost weights must be non-negative".into()));
        }
        if self.solver_iterations < 1 || self.solver_step <= 0.0 || self.control_dt <= 0.0 {
            return Err(Error::InvalidConfig("solver settings must be positive".into()));
        }
        if self.wheel_speed_scale <= 0.0 {
            return Err(Error::InvalidConfig("wheel speed scale must be positive".into()));
        }
        Ok(())
    }
}

/// The controller's one-step predictor: either a trained model with its
/// inertia conditioning, or the rigid-body equations themselves (useful as
/// an oracle and for controller bring-up).
pub enum MpcModel<'a> {
    Learned {
        model: &'a FlowModel,
        cond: [f64; COND_WIDTH],
    },
    Exact(&'a SpacecraftParams),
}

impl<'a> MpcModel<'a> {
    pub fn learned(model: &'a FlowModel, believed: &SpacecraftParams) -> Self {
        let mut cond = [0.0; COND_WIDTH];
        cond.copy_from_slice(&conditioning(believed));
        MpcModel::Learned { model, cond }
    }

    /// Learned predictor conditioned on its own training spacecraft.
    pub fn learned_stored(model: &'a FlowModel) -> Self {
        MpcModel::Learned {
            model,
            cond: model.conditioning,
        }
    }

    pub fn exact(params: &'a SpacecraftParams) -> Self {
        MpcModel::Exact(params)
    }

    /// Plain one-step rate-change prediction.
    pub fn predict_delta(&self, x: &BodyState, u: Vec3, dt: f64) -> Result<Vec3> {
        match self {
            MpcModel::Learned { model, cond } => {
                model.predict_next(x.omega, x.omega_rw, u, x.omega_dot, cond)
            }
            MpcModel::Exact(p) => {
                let accel = dynamics::angular_acceleration(p, x.omega, x.omega_rw, u, Vec3::zero());
                Ok(accel * dt)
            }
        }
    }

    /// Same prediction as a tape subgraph over `[1,3]` state vars.
    fn delta_graph(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        omega: Var,
        omega_rw: Var,
        omega_dot: Var,
        u: Var,
        dt: f64,
    ) -> Result<Var> {
        match self {
            MpcModel::Learned { model, cond } => {
                let vars = bound.vars.as_ref().expect("learned model bound");
                let raw = tape.concat_cols(&[omega, omega_rw, u, omega_dot])?;
                let mean = tape.constant(Tensor::row(&model.normalization.input_mean));
                let inv_std: Vec<f64> = model
                    .normalization
                    .input_std
                    .iter()
                    .map(|s| 1.0 / s)
                    .collect();
                let inv_std = tape.constant(Tensor::row(&inv_std));
                let centered = tape.sub(raw, mean)?;
                let norm_in = tape.mul(centered, inv_std)?;
                let out = model.forward_graph(tape, vars, norm_in, cond)?;
                let first = tape.slice_cols(out, 0, 3)?;
                let sigma = tape.constant(Tensor::row(&model.normalization.target_std));
                tape.mul(first, sigma)
            }
            MpcModel::Exact(p) => {
                let is_t = tape.constant(Tensor::from_slice_2d(3, 3, &p.inertia_body.transpose().m)?);
                let irw_t =
                    tape.constant(Tensor::from_slice_2d(3, 3, &p.inertia_wheels.transpose().m)?);
                let minv_t = tape.constant(Tensor::from_slice_2d(
                    3,
                    3,
                    &p.body_minus_wheels_inv().transpose().m,
                )?);
                let body_mom = tape.matmul(omega, is_t)?;
                let wheel_mom = tape.matmul(omega_rw, irw_t)?;
                let momentum = tape.add(body_mom, wheel_mom)?;
                let gyro = cross3_rows(tape, omega, momentum)?;
                let forcing = tape.add(gyro, u)?;
                let rhs = tape.neg(forcing);
                let accel = tape.matmul(rhs, minv_t)?;
                Ok(tape.scale(accel, dt))
            }
        }
    }

    fn bind(&self, tape: &mut Tape) -> BoundModel {
        match self {
            MpcModel::Learned { model, .. } => BoundModel {
                vars: Some(model.bind(tape, false)),
            },
            MpcModel::Exact(_) => BoundModel { vars: None },
        }
    }
}

struct BoundModel {
    vars: Option<crate::flow::ModelVars>,
}

/// One controller prediction step: the model estimates `Δω̂`, the implied
/// acceleration and wheel rate follow from the wheel equation, and the
/// attitude propagates with the *input* body rate. Everything integrates by
/// one explicit Euler step and the quaternion is renormalized.
pub fn learned_step(
    model: &MpcModel,
    x: &BodyState,
    u: Vec3,
    p: &SpacecraftParams,
    dt: f64,
) -> Result<BodyState> {
    let delta = model.predict_delta(x, u, dt)?;
    let omega_dot = delta * (1.0 / dt);
    let inv = p.wheel_inv_diag();
    let wheel_rate = Vec3::new(inv.x * u.x, inv.y * u.y, inv.z * u.z) - omega_dot;
    let q_dot = dynamics::quaternion_derivative(x.attitude, x.omega);
    let q_next = Quaternion::new(
        x.attitude.q0 + q_dot.q0 * dt,
        x.attitude.q1 + q_dot.q1 * dt,
        x.attitude.q2 + q_dot.q2 * dt,
        x.attitude.q3 + q_dot.q3 * dt,
    )
    .normalized();
    Ok(BodyState {
        attitude: q_next,
        omega: x.omega + delta,
        omega_rw: x.omega_rw + wheel_rate * dt,
        omega_dot,
    })
}

/// Tracking error of a state against the attitude reference: quaternion part
/// `q_ref − q` after hemisphere alignment (the desired-minus-current
/// convention), rate parts taken raw against zero references.
pub fn error_state(x: &BodyState, q_ref: Quaternion) -> [f64; 13] {
    let q = if x.attitude.dot(q_ref) < 0.0 {
        x.attitude.negated()
    } else {
        x.attitude
    };
    [
        q_ref.q0 - q.q0,
        q_ref.q1 - q.q1,
        q_ref.q2 - q.q2,
        q_ref.q3 - q.q3,
        x.omega.x,
        x.omega.y,
        x.omega.z,
        x.omega_rw.x,
        x.omega_rw.y,
        x.omega_rw.z,
        x.omega_dot.x,
        x.omega_dot.y,
        x.omega_dot.z,
    ]
}

/// A candidate solution: the torque sequence, the predicted state sequence
/// `X_0..X_n` it induces, and its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub torques: Vec<Vec3>,
    pub states: Vec<BodyState>,
    pub cost: f64,
}

/// State weights with the wheel-speed entries rescaled to act on
/// limit-normalized speeds.
fn effective_state_weights(cfg: &MpcConfig) -> [f64; 13] {
    let mut w = cfg.state_weights;
    let s2 = cfg.wheel_speed_scale * cfg.wheel_speed_scale;
    for wi in &mut w[7..10] {
        *wi /= s2;
    }
    w
}

/// Quadratic plan cost:
/// `Σ_{k=0}^{n−1} (e_kᵀQe_k + u_kᵀCu_k + Δu_kᵀRΔu_k) + e_nᵀQe_n`,
/// with `Δu_0` measured against the previously applied torque.
pub fn plan_cost(plan: &Plan, q_ref: Quaternion, cfg: &MpcConfig, u_prev: Vec3) -> f64 {
    let n = plan.torques.len();
    let weights = effective_state_weights(cfg);
    let mut cost = 0.0;
    for k in 0..n {
        let e = error_state(&plan.states[k], q_ref);
        for (i, &w) in weights.iter().enumerate() {
            cost += w * e[i] * e[i];
        }
        let u = plan.torques[k];
        let ua = u.to_array();
        for i in 0..3 {
            cost += cfg.torque_weights[i] * ua[i] * ua[i];
        }
        let prev = if k == 0 { u_prev } else { plan.torques[k - 1] };
        let du = (u - prev).to_array();
        for i in 0..3 {
            cost += cfg.torque_rate_weights[i] * du[i] * du[i];
        }
    }
    let e = error_state(&plan.states[n], q_ref);
    for (i, &w) in weights.iter().enumerate() {
        cost += w * e[i] * e[i];
    }
    cost
}

/// Roll a torque sequence through the predictor and price it.
fn evaluate_plan(
    model: &MpcModel,
    x0: &BodyState,
    torques: &[Vec3],
    q_ref: Quaternion,
    cfg: &MpcConfig,
    p: &SpacecraftParams,
    u_prev: Vec3,
) -> Result<Plan> {
    let mut states = Vec::with_capacity(torques.len() + 1);
    states.push(*x0);
    let mut x = *x0;
    for &u in torques {
        x = learned_step(model, &x, u, p, cfg.control_dt)?;
        states.push(x);
    }
    let mut plan = Plan {
        torques: torques.to_vec(),
        states,
        cost: 0.0,
    };
    plan.cost = plan_cost(&plan, q_ref, cfg, u_prev);
    Ok(plan)
}

/// Quaternion kinematics `q̇ = ½Ω(ω)q` as a tape subgraph.
fn quat_kinematics_graph(tape: &mut Tape, q: Var, omega: Var) -> Result<Var> {
    let q0 = tape.slice_cols(q, 0, 1)?;
    let q1 = tape.slice_cols(q, 1, 2)?;
    let q2 = tape.slice_cols(q, 2, 3)?;
    let q3 = tape.slice_cols(q, 3, 4)?;
    let wx = tape.slice_cols(omega, 0, 1)?;
    let wy = tape.slice_cols(omega, 1, 2)?;
    let wz = tape.slice_cols(omega, 2, 3)?;

    // q̇0 = −½(q1ωx + q2ωy + q3ωz)
    let a = tape.mul(q1, wx)?;
    let b = tape.mul(q2, wy)?;
    let c = tape.mul(q3, wz)?;
    let ab = tape.add(a, b)?;
    let abc = tape.add(ab, c)?;
    let d0 = tape.scale(abc, -0.5);
    // q̇1 = ½(q0ωx + q2ωz − q3ωy)
    let a = tape.mul(q0, wx)?;
    let b = tape.mul(q2, wz)?;
    let c = tape.mul(q3, wy)?;
    let ab = tape.add(a, b)?;
    let abc = tape.sub(ab, c)?;
    let d1 = tape.scale(abc, 0.5);
    // q̇2 = ½(q0ωy − q1ωz + q3ωx)
    let a = tape.mul(q0, wy)?;
    let b = tape.mul(q1, wz)?;
    let c = tape.mul(q3, wx)?;
    let ab = tape.sub(a, b)?;
    let abc = tape.add(ab, c)?;
    let d2 = tape.scale(abc, 0.5);
    // q̇3 = ½(q0ωz + q1ωy − q2ωx)
    let a = tape.mul(q0, wz)?;
    let b = tape.mul(q1, wy)?;
    let c = tape.mul(q2, wx)?;
    let ab = tape.add(a, b)?;
    let abc = tape.sub(ab, c)?;
    let d3 = tape.scale(abc, 0.5);

    tape.concat_cols(&[d0, d1, d2, d3])
}

/// Solve for the horizon's torque plan by projected adaptive-gradient
/// descent through the predictor. Deterministic; returns the best iterate
/// (which is never worse than the warm start).
pub fn solve(
    model: &MpcModel,
    x0: &BodyState,
    q_ref: Quaternion,
    cfg: &MpcConfig,
    p: &SpacecraftParams,
    warm_start: Option<&Plan>,
    u_prev: Vec3,
) -> Result<Plan> {
    cfg.validate()?;
    let n = cfg.horizon;
    let bound = cfg.torque_bound;

    // warm start: previous plan shifted one step, last torque repeated
    let mut torques: Vec<Vec3> = match warm_start {
        Some(plan) if plan.torques.len() == n => {
            let mut t: Vec<Vec3> = plan.torques[1..].to_vec();
            t.push(*plan.torques.last().unwrap());
            t
        }
        _ => vec![Vec3::zero(); n],
    };
    for u in &mut torques {
        *u = u.clamp_abs(bound);
    }

    let warm_plan = evaluate_plan(model, x0, &torques, q_ref, cfg, p, u_prev)?;
    if !warm_plan.cost.is_finite() {
        return Err(Error::Numerical("non-finite cost in warm-start rollout".into()));
    }
    // the tape cost omits the constant stage-0 error; add it back when
    // comparing against plain plan costs
    let stage0 = stage0_cost(x0, q_ref, cfg);
    let mut best_torques = torques.clone();
    let mut best_cost = warm_plan.cost;

    let mut decision: Vec<Tensor> = torques
        .iter()
        .map(|u| Tensor::row(&u.to_array()))
        .collect();
    let mut opt = OptimizerState::new(&decision, cfg.solver_step);
    let dt = cfg.control_dt;
    let inv = p.wheel_inv_diag();

    for _ in 0..cfg.solver_iterations {
        let mut tape = Tape::new();
        let bound_model = model.bind(&mut tape);
        let u_vars: Vec<Var> = decision
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect();

        let mut q = tape.constant(Tensor::row(&x0.attitude.to_array()));
        let mut omega = tape.constant(Tensor::row(&x0.omega.to_array()));
        let mut omega_rw = tape.constant(Tensor::row(&x0.omega_rw.to_array()));
        let mut omega_dot = tape.constant(Tensor::row(&x0.omega_dot.to_array()));
        let wheel_inv = tape.constant(Tensor::row(&[inv.x, inv.y, inv.z]));
        let q_weights = tape.constant(Tensor::row(&effective_state_weights(cfg)));
        let c_weights = tape.constant(Tensor::row(&cfg.torque_weights));
        let r_weights = tape.constant(Tensor::row(&cfg.torque_rate_weights));
        let q_ref_row = Tensor::row(&q_ref.to_array());

        let mut cost: Option<Var> = None;
        let add_cost = |tape: &mut Tape, acc: &mut Option<Var>, term: Var| -> Result<()> {
            *acc = Some(match *acc {
                Some(prev) => tape.add(prev, term)?,
                None => term,
            });
            Ok(())
        };

        // stage error of X_0 is constant; skip building it
        for k in 0..n {
            let u = u_vars[k];
            // torque magnitude and rate penalties
            let u_sq = tape.square(u);
            let u_cost_v = tape.mul(u_sq, c_weights)?;
            let u_cost = tape.sum_all(u_cost_v);
            add_cost(&mut tape, &mut cost, u_cost)?;
            let prev = if k == 0 {
                tape.constant(Tensor::row(&u_prev.to_array()))
            } else {
                u_vars[k - 1]
            };
            let du = tape.sub(u, prev)?;
            let du_sq = tape.square(du);
            let du_cost_v = tape.mul(du_sq, r_weights)?;
            let du_cost = tape.sum_all(du_cost_v);
            add_cost(&mut tape, &mut cost, du_cost)?;

            // predictor step
            let delta = model.delta_graph(&mut tape, &bound_model, omega, omega_rw, omega_dot, u, dt)?;
            let q_dot = quat_kinematics_graph(&mut tape, q, omega)?;
            let q_step = tape.scale(q_dot, dt);
            let q_unnorm = tape.add(q, q_step)?;
            let q_norm = tape.row_norms(q_unnorm)?;
            let q_norm_inv = tape.recip(q_norm);
            q = tape.mul_col(q_unnorm, q_norm_inv)?;
            omega = tape.add(omega, delta)?;
            omega_dot = tape.scale(delta, 1.0 / dt);
            let drive = tape.mul(u, wheel_inv)?;
            let drive_dt = tape.scale(drive, dt);
            let wheel_step = tape.sub(drive_dt, delta)?;
            omega_rw = tape.add(omega_rw, wheel_step)?;

            // stage (and at k = n-1, terminal) state error
            let flips = if tensor_dot4(tape.value(q).data(), &q_ref_row) < 0.0 {
                -1.0
            } else {
                1.0
            };
            let q_aligned = tape.scale(q, flips);
            let q_ref_c = tape.constant(q_ref_row.clone());
            let e_q = tape.sub(q_ref_c, q_aligned)?;
            let e = tape.concat_cols(&[e_q, omega, omega_rw, omega_dot])?;
            let e_sq = tape.square(e);
            let e_cost_v = tape.mul(e_sq, q_weights)?;
            let e_cost = tape.sum_all(e_cost_v);
            add_cost(&mut tape, &mut cost, e_cost)?;
        }

        let total = cost.expect("horizon is at least 1");
        let tape_cost = tape.value(total).item()? + stage0;
        if !tape_cost.is_finite() {
            return Err(Error::Numerical("non-finite cost in solver rollout".into()));
        }
        if tape_cost < best_cost {
            best_cost = tape_cost;
            best_torques = decision
                .iter()
                .map(|t| Vec3::new(t.data()[0], t.data()[1], t.data()[2]))
                .collect();
        }
        let grads_out = tape.backward(total)?;
        let grads: Vec<Tensor> = u_vars
            .iter()
            .map(|&v| {
                grads_out
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(vec![1, 3]))
            })
            .collect();
        adam_step(&mut decision, &grads, &mut opt)?;
        for t in &mut decision {
            for v in t.data_mut() {
                *v = v.clamp(-bound, bound);
            }
        }
    }

    // price the tracked best and the post-final-update iterate exactly, then
    // keep the cheapest of those and the warm start (descent is exact)
    let final_torques: Vec<Vec3> = decision
        .iter()
        .map(|t| Vec3::new(t.data()[0], t.data()[1], t.data()[2]))
        .collect();
    let mut best = warm_plan;
    for candidate_torques in [best_torques, final_torques] {
        let candidate = evaluate_plan(model, x0, &candidate_torques, q_ref, cfg, p, u_prev)?;
        if candidate.cost < best.cost {
            best = candidate;
        }
    }
    Ok(best)
}

fn tensor_dot4(q: &[f64], q_ref: &Tensor) -> f64 {
    q.iter().zip(q_ref.data()).map(|(a, b)| a * b).sum()
}

/// Stage-0 error term of the cost that [`solve`] omits (it is constant in
/// the decision variables). Exposed so cost consistency can be audited.
pub fn stage0_cost(x0: &BodyState, q_ref: Quaternion, cfg: &MpcConfig) -> f64 {
    let e = error_state(x0, q_ref);
    e.iter()
        .zip(&effective_state_weights(cfg))
        .map(|(v, w)| w * v * v)
        .sum()
}

/// One recorded closed-loop experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopRun {
    /// True simulator states and the torques applied to them.
    pub trajectory: Trajectory,
    /// Plan cost per control step (final entry repeats the last solve).
    pub solve_costs: Vec<f64>,
}

/// Closed-loop integration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedLoopConfig {
    pub duration: f64,
    pub sim_dt: f64,
    pub disturbance: Disturbance,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        Self {
            duration: 360.0,
            sim_dt: 0.001,
            disturbance: Disturbance::None,
        }
    }
}

/// Run the controller against the ground-truth integrator.
///
/// Every control period the true state is observed through `observe` (noise
/// injection hook; identity for nominal runs), the observed acceleration is
/// the backward difference of the observed rates, the plan is re-solved from
/// the shifted warm start, and the first torque is applied for one period.
pub fn closed_loop(
    model: &MpcModel,
    true_params: &SpacecraftParams,
    x0: &BodyState,
    q_ref: Quaternion,
    cfg: &ClosedLoopConfig,
    mpc_cfg: &MpcConfig,
    mut observe: impl FnMut(&BodyState, usize) -> BodyState,
) -> Result<ClosedLoopRun> {
    mpc_cfg.validate()?;
    if cfg.duration <= 0.0 || cfg.sim_dt <= 0.0 {
        return Err(Error::InvalidConfig("closed-loop times must be positive".into()));
    }
    let control_dt = mpc_cfg.control_dt;
    let substeps = (control_dt / cfg.sim_dt).round() as usize;
    if substeps < 1 || (control_dt / cfg.sim_dt - substeps as f64).abs() > 1e-9 * substeps as f64 {
        return Err(Error::InvalidConfig(format!(
            "sim_dt {} must divide control_dt {control_dt} exactly",
            cfg.sim_dt
        )));
    }
    let steps = (cfg.duration / control_dt).round() as usize;

    let mut state = *x0;
    let mut warm: Option<Plan> = None;
    let mut u_prev = Vec3::zero();
    let mut prev_obs_omega: Option<Vec3> = None;

    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut torques = Vec::with_capacity(steps + 1);
    let mut costs = Vec::with_capacity(steps + 1);

    for tick in 0..steps {
        let t = tick as f64 * control_dt;
        let mut obs = observe(&state, tick);
        obs.attitude = obs.attitude.normalized();
        obs.omega_dot = match prev_obs_omega {
            Some(prev) => (obs.omega - prev) * (1.0 / control_dt),
            None => Vec3::zero(),
        };
        prev_obs_omega = Some(obs.omega);

        let plan = solve(model, &obs, q_ref, mpc_cfg, true_params, warm.as_ref(), u_prev)?;
        let u = plan.torques[0];

        times.push(t);
        states.push(state);
        torques.push(u);
        costs.push(plan.cost);

        for sub in 0..substeps {
            let t_sub = t + sub as f64 * cfg.sim_dt;
            let n_ext = cfg.disturbance.torque(true_params, state.attitude, t_sub);
            state = dynamics::rk4_step(true_params, &state, u, n_ext, cfg.sim_dt);
            state.omega_rw = state.omega_rw.clamp_abs(true_params.max_wheel_speed);
        }
        u_prev = u;
        warm = Some(plan);
    }
    times.push(steps as f64 * control_dt);
    states.push(state);
    torques.push(u_prev);
    costs.push(*costs.last().unwrap_or(&0.0));

    Ok(ClosedLoopRun {
        trajectory: Trajectory {
            times,
            states,
            torques,
        },
        solve_costs: costs,
    })
}

/// CSV export of a closed-loop run:
/// `time,q0..q3,w1..w3,wrw1..wrw3,u1..u3,cost,iterations`.
pub fn write_closed_loop_csv(run: &ClosedLoopRun, iterations: usize, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "time,q0,q1,q2,q3,w1,w2,w3,wrw1,wrw2,wrw3,u1,u2,u3,cost,iterations"
    )?;
    let traj = &run.trajectory;
    for i in 0..traj.len() {
        let s = &traj.states[i];
        let u = traj.torques[i];
        writeln!(
            w,
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{}",
            traj.times[i],
            s.attitude.q0,
            s.attitude.q1,
            s.attitude.q2,
            s.attitude.q3,
            s.omega.x,
            s.omega.y,
            s.omega.z,
            s.omega_rw.x,
            s.omega_rw.y,
            s.omega_rw.z,
            u.x,
            u.y,
            u.z,
            run.solve_costs[i],
            iterations
        )?;
    }
    w.flush()?;
    Ok(())
}
