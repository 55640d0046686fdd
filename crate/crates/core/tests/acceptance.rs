//! Acceptance suite. Each numbered criterion prints one `PASS`/`FAIL` line
//! (visible with `cargo test --test acceptance -- --nocapture`) and asserts.
//!
//! Criteria 5, 7, and 8 share one set of trained models built lazily on
//! first use: reduced-scale datasets (50 train runs, 10 test runs with a
//! +10% body-inertia/mass error, gravity-gradient disturbance active) and
//! two regressors of identical torque-attention architecture, one trained
//! with the dual-weighted hybrid loss (`ld`) and one purely data-driven
//! (`dd`).

use std::sync::LazyLock;
use std::time::Instant;

use satflow::autodiff::{gradcheck, Tape};
use satflow::dataset::{conditioning, extract_samples, generate_dataset, Dataset};
use satflow::dynamics::{
    angular_acceleration, rk4_step, total_angular_momentum, BodyState, Disturbance,
    SpacecraftParams,
};
use satflow::evaluation::{
    ape, robustness_experiment, self_loop_eval, spe, wilcoxon_signed_rank, ConditionedModel,
    NoiseKind, RegressionMetrics, StepPredictor,
};
use satflow::flow::{FlowModel, Head, ModelConfig};
use satflow::math::{Matrix3, Quaternion, Vec3};
use satflow::mpc::{closed_loop, solve, ClosedLoopConfig, ClosedLoopRun, MpcConfig, MpcModel};
use satflow::sim::{run_maneuver, SimConfig, Trajectory};
use satflow::tensor::Tensor;
use satflow::training::{
    fit, loss_data_driven, loss_physics_parts, rollout_predicted, LossWeights, TrainConfig,
};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check(criterion: &str, description: &str, pass: bool, detail: String) {
    println!(
        "criterion {criterion} ({description}): {} [{detail}]",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

const ORBITAL_RATE: f64 = 0.00113;
const DATA_SEED: u64 = 20240601;

// ---------------------------------------------------------------------------
// shared trained artifacts for criteria 5, 7, 8
// ---------------------------------------------------------------------------

struct Artifacts {
    nominal: SpacecraftParams,
    test_ds: Dataset,
    ld: FlowModel,
    dd: FlowModel,
}

static ARTIFACTS: LazyLock<Artifacts> = LazyLock::new(|| {
    let nominal = SpacecraftParams::reference();
    let mut train_cfg = SimConfig::new(nominal, DATA_SEED);
    train_cfg.disturbance = Disturbance::GravityGradient {
        orbital_rate: ORBITAL_RATE,
    };
    let steps = 10;
    eprintln!("[artifacts] generating 50 training runs");
    let train_ds = generate_dataset(&train_cfg, 50, steps).expect("training dataset");

    let mut test_cfg = train_cfg.clone();
    test_cfg.seed = DATA_SEED + 50;
    test_cfg.inertia_scale = 1.1;
    eprintln!("[artifacts] generating 10 test runs (inertia scale 1.1)");
    let test_ds = generate_dataset(&test_cfg, 10, steps).expect("test dataset");

    let model_cfg = ModelConfig {
        head: Head::AttnTorque,
        steps,
        seed: DATA_SEED,
        ..ModelConfig::default()
    };
    let base_train = TrainConfig {
        batch_size: 4096,
        max_epochs: 400,
        patience: 60,
        validation_fraction: 0.1,
        learning_rate: 1e-3,
        seed: DATA_SEED,
        dual_step: 1e-2,
        lr_decay: 0.5,
        lr_decay_every: 80,
        progress: false,
        weights: LossWeights::lagrangian_dual(),
    };

    let cond = conditioning(&train_ds.params);
    eprintln!("[artifacts] training the dual-weighted model");
    let started = Instant::now();
    let ld_init = FlowModel::new(model_cfg, train_ds.normalization, cond).expect("model");
    let (ld, _) = fit(ld_init, &train_ds, &base_train).expect("ld fit");
    eprintln!(
        "[artifacts] ld trained in {:.0} s; training the data-driven model",
        started.elapsed().as_secs_f64()
    );
    let dd_cfg = TrainConfig {
        weights: LossWeights::data_driven_only(),
        ..base_train
    };
    let dd_init = FlowModel::new(model_cfg, train_ds.normalization, cond).expect("model");
    let (dd, _) = fit(dd_init, &train_ds, &dd_cfg).expect("dd fit");
    eprintln!(
        "[artifacts] both models ready after {:.0} s",
        started.elapsed().as_secs_f64()
    );

    Artifacts {
        nominal,
        test_ds,
        ld,
        dd,
    }
});

struct Maneuver {
    ld_run: ClosedLoopRun,
    dd_run: ClosedLoopRun,
    ld_wall_s: f64,
    q_ref: Quaternion,
}

static MANEUVER: LazyLock<Maneuver> = LazyLock::new(|| {
    let a = &*ARTIFACTS;
    let q_ref = Quaternion::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2);
    let x0 = BodyState::at_rest(Quaternion::identity());
    let cl_cfg = ClosedLoopConfig::default();
    let mpc_cfg = MpcConfig::default();

    eprintln!("[maneuver] 360 s closed loop with the ld model");
    let started = Instant::now();
    let ld_model = MpcModel::learned_stored(&a.ld);
    let ld_run = closed_loop(&ld_model, &a.nominal, &x0, q_ref, &cl_cfg, &mpc_cfg, |s, _| *s)
        .expect("ld closed loop");
    let ld_wall_s = started.elapsed().as_secs_f64();

    eprintln!("[maneuver] 360 s closed loop with the dd model");
    let dd_model = MpcModel::learned_stored(&a.dd);
    let dd_run = closed_loop(&dd_model, &a.nominal, &x0, q_ref, &cl_cfg, &mpc_cfg, |s, _| *s)
        .expect("dd closed loop");

    Maneuver {
        ld_run,
        dd_run,
        ld_wall_s,
        q_ref,
    }
});

// ---------------------------------------------------------------------------
// criterion 1: physics oracles
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_physics_oracles() {
    let started = Instant::now();
    let p = SpacecraftParams::reference();

    // torque-free momentum conservation over 180 s at 1 ms steps
    let mut s = BodyState {
        attitude: Quaternion::identity(),
        omega: Vec3::new(0.1, 0.05, 0.02),
        omega_rw: Vec3::new(8.0, -12.0, 20.0),
        omega_dot: Vec3::zero(),
    };
    let h0 = total_angular_momentum(&p, s.omega, s.omega_rw).norm();
    let mut worst_drift = 0.0f64;
    let mut worst_norm = 0.0f64;
    for _ in 0..180_000 {
        s = rk4_step(&p, &s, Vec3::zero(), Vec3::zero(), 0.001);
        worst_norm = worst_norm.max((s.attitude.norm() - 1.0).abs());
    }
    let h1 = total_angular_momentum(&p, s.omega, s.omega_rw).norm();
    worst_drift = worst_drift.max(((h1 - h0) / h0).abs());

    // axisymmetric analytic spinner: wheels counter-spun so the closed-form
    // precession of inertia diag(a-rho, a-rho, c-rho) applies exactly
    let rho = 0.001;
    let (ia, ic) = (4.0, 6.0);
    let pa = SpacecraftParams::new(
        Matrix3::diagonal(ia, ia, ic),
        Matrix3::diagonal(rho, rho, rho),
        58.0,
        0.05,
        628.0,
        0.1,
    )
    .unwrap();
    let w0 = Vec3::new(0.08, 0.0, 0.5);
    let mut sa = BodyState {
        attitude: Quaternion::identity(),
        omega: w0,
        omega_rw: -w0,
        omega_dot: Vec3::zero(),
    };
    let rate = (ic - ia) / (ia - rho) * w0.z;
    let mut worst_spin = 0.0f64;
    for i in 1..=60_000 {
        sa = rk4_step(&pa, &sa, Vec3::zero(), Vec3::zero(), 0.001);
        if i % 1000 == 0 {
            let t = i as f64 * 0.001;
            let expect = Vec3::new(0.08 * (rate * t).cos(), 0.08 * (rate * t).sin(), w0.z);
            worst_spin = worst_spin.max((sa.omega - expect).norm());
        }
    }

    // internal momentum exchange: wheel torques only
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sw = BodyState {
        attitude: Quaternion::identity(),
        omega: Vec3::new(0.02, -0.03, 0.01),
        omega_rw: Vec3::new(15.0, 10.0, -5.0),
        omega_dot: Vec3::zero(),
    };
    let hw0 = total_angular_momentum(&p, sw.omega, sw.omega_rw).norm();
    let mut worst_wheel_drift = 0.0f64;
    for _ in 0..600 {
        let u = Vec3::new(
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
        );
        for _ in 0..100 {
            sw = rk4_step(&p, &sw, u, Vec3::zero(), 0.001);
        }
        let hw = total_angular_momentum(&p, sw.omega, sw.omega_rw).norm();
        worst_wheel_drift = worst_wheel_drift.max(((hw - hw0) / hw0).abs());
        assert!(sw.omega_rw.abs_max() < p.max_wheel_speed, "no saturation in this scenario");
    }

    let runtime = started.elapsed().as_secs_f64();
    let pass = worst_drift < 1e-9
        && worst_norm < 1e-9
        && worst_spin < 1e-6
        && worst_wheel_drift < 1e-8
        && runtime < 60.0;
    check(
        "1",
        "physics oracles",
        pass,
        format!(
            "torque-free drift {worst_drift:.2e}, quat norm {worst_norm:.2e}, \
             spinner error {worst_spin:.2e} rad/s, wheel-run drift {worst_wheel_drift:.2e}, \
             runtime {runtime:.1} s"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 2: autodiff vs central differences
// ---------------------------------------------------------------------------

fn small_model(head: Head) -> FlowModel {
    let cfg = ModelConfig {
        coupling_layers: 2,
        hidden_layers: 2,
        hidden_units: 6,
        steps: 3,
        head,
        token_dim: 4,
        scale_clamp: 2.0,
        seed: 12,
    };
    let norm = satflow::dataset::Normalization {
        input_mean: [0.0; 12],
        input_std: [1.0; 12],
        target_std: [0.5, 1.0, 0.25],
        accel_std: [1.0; 3],
    };
    FlowModel::new(cfg, norm, conditioning(&SpacecraftParams::reference())).unwrap()
}

fn model_loss_report(head: Head, with_physics: bool) -> f64 {
    // full objective: forward, de-normalize, data loss + physics rollout
    let model = small_model(head);
    let p = SpacecraftParams::reference();
    let batch = 3;
    let steps = model.config.steps;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let input = Tensor::new(
        vec![batch, 12],
        (0..batch * 12).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    )
    .unwrap();
    let target = Tensor::new(
        vec![batch, steps * 3],
        (0..batch * steps * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let omega0 = Tensor::new(
        vec![batch, 3],
        (0..batch * 3).map(|_| rng.gen_range(-0.1..0.1)).collect(),
    )
    .unwrap();
    let omega_rw0 = Tensor::new(
        vec![batch, 3],
        (0..batch * 3).map(|_| rng.gen_range(-20.0..20.0)).collect(),
    )
    .unwrap();
    let torque = Tensor::new(
        vec![batch, 3],
        (0..batch * 3).map(|_| rng.gen_range(-0.05..0.05)).collect(),
    )
    .unwrap();

    let params: Vec<(String, Tensor)> = model
        .named_params()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let sigma = model.normalization.target_std;
    let cond = model.conditioning;
    let dt = p.control_dt;
    let inv = p.wheel_inv_diag();

    let report = gradcheck(
        &params,
        |tape, vars| {
            // forward_graph reads parameter values from the tape handles, so
            // injecting the gradcheck leaves wires the whole model through
            let bound = satflow::flow::ModelVars::from_handles(vars.to_vec());
            let input_v = tape.constant(input.clone());
            let out_norm = model.forward_graph(tape, &bound, input_v, &cond)?;

            // data term
            let target_v = tape.constant(target.clone());
            let diff = tape.sub(out_norm, target_v)?;
            let flat = tape.reshape(diff, vec![batch * steps, 3])?;
            let mut acc = None;
            for a in 0..3 {
                let axis = tape.slice_cols(flat, a, a + 1)?;
                let sq = tape.square(axis);
                let mse = tape.mean_all(sq);
                let rmse = tape.sqrt(mse);
                let term = tape.scale(rmse, 1.0 / 3.0);
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, term)?,
                    None => term,
                });
            }
            let l_dd = acc.unwrap();
            if !with_physics {
                return Ok(l_dd);
            }

            // physics rollout in raw units
            let sigma_tiled: Vec<f64> = (0..steps * 3).map(|c| sigma[c % 3]).collect();
            let sigma_v = tape.constant(Tensor::tile_rows(batch, &sigma_tiled));
            let out_raw = tape.mul(out_norm, sigma_v)?;
            let is_t = tape.constant(
                Tensor::from_slice_2d(3, 3, &p.inertia_body.transpose().m).unwrap(),
            );
            let irw_t = tape.constant(
                Tensor::from_slice_2d(3, 3, &p.inertia_wheels.transpose().m).unwrap(),
            );
            let minv_t = tape.constant(
                Tensor::from_slice_2d(3, 3, &p.body_minus_wheels_inv().transpose().m).unwrap(),
            );
            let u_v = tape.constant(torque.clone());
            let drive: Vec<f64> = torque
                .data()
                .iter()
                .enumerate()
                .map(|(i, &u)| {
                    let axis = [inv.x, inv.y, inv.z][i % 3];
                    axis * u * dt
                })
                .collect();
            let drive_v = tape.constant(Tensor::new(vec![batch, 3], drive).unwrap());
            let mut omega = tape.constant(omega0.clone());
            let mut omega_rw = tape.constant(omega_rw0.clone());
            let mut residuals = Vec::new();
            for k in 0..steps {
                let pred_k = tape.slice_cols(out_raw, k * 3, k * 3 + 3)?;
                let body_mom = tape.matmul(omega, is_t)?;
                let wheel_mom = tape.matmul(omega_rw, irw_t)?;
                let momentum = tape.add(body_mom, wheel_mom)?;
                let gyro = satflow::autodiff::cross3_rows(tape, omega, momentum)?;
                let forcing = tape.add(gyro, u_v)?;
                let rhs = tape.neg(forcing);
                let accel_phys = tape.matmul(rhs, minv_t)?;
                let accel_hat = tape.scale(pred_k, 1.0 / dt);
                residuals.push(tape.sub(accel_hat, accel_phys)?);
                omega = tape.add(omega, pred_k)?;
                let step = tape.sub(drive_v, pred_k)?;
                omega_rw = tape.add(omega_rw, step)?;
            }
            let stack = tape.concat_cols(&residuals)?;
            let flat = tape.reshape(stack, vec![batch * steps, 3])?;
            let mut acc = None;
            for a in 0..3 {
                let axis = tape.slice_cols(flat, a, a + 1)?;
                let sq = tape.square(axis);
                let mse = tape.mean_all(sq);
                let rmse = tape.sqrt(mse);
                let term = tape.scale(rmse, 1.0 / 3.0);
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, term)?,
                    None => term,
                });
            }
            let l_pi = acc.unwrap();
            let a_term = tape.scale(l_dd, 0.5);
            let b_term = tape.scale(l_pi, 0.5);
            tape.add(a_term, b_term)
        },
        1e-6,
    )
    .unwrap();
    report.worst_relative_error
}

#[test]
fn criterion_2_autodiff_finite_differences() {
    let started = Instant::now();

    // primitive zoo
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::new(vec![4, 6], (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let params = vec![
        ("w".to_string(), Tensor::new(vec![6, 6], (0..36).map(|_| rng.gen_range(-0.7..0.7)).collect()).unwrap()),
        ("b".to_string(), Tensor::new(vec![6], (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap()),
    ];
    let primitives = gradcheck(
        &params,
        |tape, vars| {
            let xv = tape.constant(x.clone());
            let h = tape.matmul(xv, vars[0])?;
            let h = tape.add_row(h, vars[1])?;
            let t = tape.tanh(h);
            let r = tape.relu(h);
            let mix = tape.mul(t, r)?;
            let scaled = tape.scale(mix, 0.3);
            let e = tape.exp(scaled);
            let sm = tape.softmax_last(e)?;
            let sq = tape.square(sm);
            let shifted = tape.add_scalar(sq, 1.0);
            let root = tape.sqrt(shifted);
            let norms = tape.row_norms(root)?;
            Ok(tape.mean_all(norms))
        },
        1e-6,
    )
    .unwrap()
    .worst_relative_error;

    // coupling layer alone
    let coupling = {
        let model = small_model(Head::Plain);
        let feats = Tensor::new(
            vec![3, satflow::flow::FEATURE_WIDTH],
            (0..3 * satflow::flow::FEATURE_WIDTH)
                .map(|i| ((i * 37 % 17) as f64) / 8.5 - 1.0)
                .collect(),
        )
        .unwrap();
        let params: Vec<(String, Tensor)> = model
            .named_params()
            .filter(|(n, _)| n.starts_with("coupling0."))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        gradcheck(
            &params,
            |tape, vars| {
                // scale/shift nets of layer 0, even mask
                let keep: Vec<usize> = (0..satflow::flow::FEATURE_WIDTH).step_by(2).collect();
                let transform: Vec<usize> = (1..satflow::flow::FEATURE_WIDTH).step_by(2).collect();
                let xv = tape.constant(feats.clone());
                let kept = tape.gather_cols(xv, &keep)?;
                let moved = tape.gather_cols(xv, &transform)?;
                let mlp = |tape: &mut Tape, w: &[satflow::autodiff::Var]| -> satflow::Result<satflow::autodiff::Var> {
                    let mut h = kept;
                    for l in 0..=2 {
                        h = tape.matmul(h, w[2 * l])?;
                        h = tape.add_row(h, w[2 * l + 1])?;
                        if l < 2 {
                            h = tape.relu(h);
                        }
                    }
                    Ok(h)
                };
                let s_raw = mlp(tape, &vars[0..6])?;
                let s_b = tape.tanh(s_raw);
                let s = tape.scale(s_b, 2.0);
                let t = mlp(tape, &vars[6..12])?;
                let es = tape.exp(s);
                let scaled = tape.mul(moved, es)?;
                let y = tape.add(scaled, t)?;
                let out = tape.interleave_cols(kept, y, &keep, &transform)?;
                let sq = tape.square(out);
                Ok(tape.mean_all(sq))
            },
            1e-6,
        )
        .unwrap()
        .worst_relative_error
    };

    // both attention heads through the full model, and the combined loss
    let sa1 = model_loss_report(Head::AttnFeatures, false);
    let sa2 = model_loss_report(Head::AttnTorque, false);
    let full = model_loss_report(Head::AttnTorque, true);

    let worst = primitives.max(coupling).max(sa1).max(sa2).max(full);
    let runtime = started.elapsed().as_secs_f64();
    check(
        "2",
        "autodiff vs central differences",
        worst < 1e-5 && runtime < 60.0,
        format!(
            "primitives {primitives:.2e}, coupling {coupling:.2e}, heads {sa1:.2e}/{sa2:.2e}, \
             full loss {full:.2e}, runtime {runtime:.1} s"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 3: coupling-stack invertibility
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_flow_invertibility() {
    let cfg = ModelConfig {
        seed: 9,
        ..ModelConfig::default()
    };
    let norm = satflow::dataset::Normalization {
        input_mean: [0.0; 12],
        input_std: [1.0; 12],
        target_std: [1.0; 3],
        accel_std: [1.0; 3],
    };
    let model = FlowModel::new(cfg, norm, conditioning(&SpacecraftParams::reference())).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let feats = Tensor::new(
        vec![64, satflow::flow::FEATURE_WIDTH],
        (0..64 * satflow::flow::FEATURE_WIDTH)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect(),
    )
    .unwrap();
    let forward = model.coupling_forward_features(&feats).unwrap();
    let back = model.coupling_inverse_features(&forward).unwrap();
    let worst = feats
        .data()
        .iter()
        .zip(back.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    check(
        "3",
        "coupling-stack round trip",
        worst < 1e-10,
        format!("worst coordinate error {worst:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// criterion 4: loss formulas vs independent scalar loops
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_loss_formula_oracle() {
    let p = SpacecraftParams::reference();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (b, s) = (6, 5);
    let sigma_dw = [0.3, 0.9, 0.2];
    let sigma_wdot = [1.1, 0.4, 0.8];

    // random batch for the data term
    let pred = Tensor::new(vec![b, s * 3], (0..b * s * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let target = Tensor::new(vec![b, s * 3], (0..b * s * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let fast_dd = loss_data_driven(&pred, &target, &sigma_dw).unwrap();
    let mut naive_dd = 0.0;
    for a in 0..3 {
        let mut sse = 0.0;
        for i in 0..b {
            for k in 0..s {
                let d = pred.data()[i * s * 3 + k * 3 + a] - target.data()[i * s * 3 + k * 3 + a];
                sse += d * d;
            }
        }
        naive_dd += (sse / (b * s) as f64).sqrt() / sigma_dw[a];
    }
    naive_dd /= 3.0;
    let dd_err = (fast_dd - naive_dd).abs();

    // random sample for the physics terms
    let sample = satflow::dataset::TrainingSample {
        input: [
            0.04, -0.02, 0.01, 12.0, -8.0, 3.0, 0.02, -0.01, 0.005, 0.002, 0.001, -0.003,
        ],
        target: [1e-3, -2e-3, 5e-4],
        multi_targets: (0..s)
            .map(|_| {
                [
                    rng.gen_range(-2e-3..2e-3),
                    rng.gen_range(-2e-3..2e-3),
                    rng.gen_range(-2e-3..2e-3),
                ]
            })
            .collect(),
    };
    let preds: Vec<[f64; 3]> = (0..s)
        .map(|_| {
            [
                rng.gen_range(-2e-3..2e-3),
                rng.gen_range(-2e-3..2e-3),
                rng.gen_range(-2e-3..2e-3),
            ]
        })
        .collect();
    let (fast_accel, fast_h) = loss_physics_parts(&p, &sample, &preds, &sigma_wdot).unwrap();

    // independent scalar-loop recomputation
    let dt = p.control_dt;
    let u = sample.torque();
    let inv = p.wheel_inv_diag();
    let drive = Vec3::new(inv.x * u.x, inv.y * u.y, inv.z * u.z) * dt;
    let mut omega_hat = sample.omega();
    let mut omega_rw_hat = sample.omega_rw();
    let mut omega_true = sample.omega();
    let mut omega_rw_true = sample.omega_rw();
    let mut sse = [0.0; 3];
    let mut sse_h = 0.0;
    for k in 0..s {
        let delta = Vec3::from_array(preds[k]);
        let accel = angular_acceleration(&p, omega_hat, omega_rw_hat, u, Vec3::zero());
        let r = delta * (1.0 / dt) - accel;
        sse[0] += r.x * r.x;
        sse[1] += r.y * r.y;
        sse[2] += r.z * r.z;
        omega_hat = omega_hat + delta;
        omega_rw_hat = omega_rw_hat + drive - delta;
        let dtrue = Vec3::from_array(sample.multi_targets[k]);
        omega_true = omega_true + dtrue;
        omega_rw_true = omega_rw_true + drive - dtrue;
        let h_hat = total_angular_momentum(&p, omega_hat, omega_rw_hat).norm();
        let h_true = total_angular_momentum(&p, omega_true, omega_rw_true).norm();
        sse_h += (h_hat - h_true) * (h_hat - h_true);
    }
    let mut naive_accel = 0.0;
    for a in 0..3 {
        naive_accel += (sse[a] / s as f64).sqrt() / sigma_wdot[a];
    }
    naive_accel /= 3.0;
    let naive_h = sse_h / s as f64;
    let accel_err = (fast_accel - naive_accel).abs();
    let h_err = (fast_h - naive_h).abs();

    // Euler-consistent predictions on a constant-torque segment: the
    // acceleration residual vanishes
    let u2 = Vec3::new(0.01, -0.004, 0.002);
    let mut state = BodyState {
        attitude: Quaternion::identity(),
        omega: Vec3::new(0.03, -0.01, 0.02),
        omega_rw: Vec3::new(10.0, 4.0, -6.0),
        omega_dot: Vec3::zero(),
    };
    let mut times = vec![0.0];
    let mut states = vec![state];
    let mut torques = vec![u2];
    for tick in 1..20 {
        for _ in 0..100 {
            state = rk4_step(&p, &state, u2, Vec3::zero(), 0.001);
        }
        times.push(tick as f64 * 0.1);
        states.push(state);
        torques.push(u2);
    }
    let traj = Trajectory {
        times,
        states,
        torques,
    };
    let segment = extract_samples(&traj, 8, 0.1).unwrap();
    let seg = &segment[0];
    let mut omega = seg.omega();
    let mut omega_rw = seg.omega_rw();
    let seg_u = seg.torque();
    let seg_drive = Vec3::new(inv.x * seg_u.x, inv.y * seg_u.y, inv.z * seg_u.z) * dt;
    let mut euler_preds = Vec::new();
    for _ in 0..8 {
        let accel = angular_acceleration(&p, omega, omega_rw, seg_u, Vec3::zero());
        let delta = accel * dt;
        euler_preds.push(delta.to_array());
        omega = omega + delta;
        omega_rw = omega_rw + seg_drive - delta;
    }
    let (euler_accel_term, _) =
        loss_physics_parts(&p, seg, &euler_preds, &sigma_wdot).unwrap();

    // rollout consistency: ground-truth targets reproduce recorded states
    let rolled = rollout_predicted(&p, seg, &seg.multi_targets);
    let mut rollout_err = 0.0f64;
    for (k, r) in rolled.iter().enumerate() {
        rollout_err = rollout_err.max((r.omega - traj.states[1 + k + 1].omega).norm());
    }

    let pass = dd_err < 1e-12
        && accel_err < 1e-12
        && h_err < 1e-12
        && euler_accel_term < 1e-6
        && rollout_err < 1e-9;
    check(
        "4",
        "loss formulas vs scalar loops",
        pass,
        format!(
            "dd {dd_err:.2e}, accel {accel_err:.2e}, momentum {h_err:.2e}, \
             euler residual {euler_accel_term:.2e}, rollout {rollout_err:.2e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 5: desk-scale training reproduction
// ---------------------------------------------------------------------------

fn eval_model(model: &FlowModel, ds: &Dataset) -> RegressionMetrics {
    let predictor = ConditionedModel::stored(model);
    self_loop_eval(&predictor, ds, 10, &LossWeights::default()).expect("evaluation")
}

#[test]
fn criterion_5_training_reproduction() {
    let a = &*ARTIFACTS;
    let ld = eval_model(&a.ld, &a.test_ds);
    let dd = eval_model(&a.dd, &a.test_ds);

    let single_ok = ld.mre_single < 5.0;
    let ordering_ok = ld.mre_selfloop < dd.mre_selfloop && ld.physics_selfloop < dd.physics_selfloop;
    let wilcoxon = wilcoxon_signed_rank(&ld.per_window_mre, &dd.per_window_mre).unwrap();
    let significant = wilcoxon.p_value < 0.05;

    check(
        "5",
        "desk-scale training reproduction",
        single_ok && ordering_ok && significant,
        format!(
            "ld single {:.3}% (dd {:.3}%), self-loop mre {:.2} vs {:.2}, \
             self-loop physics {:.3} vs {:.3}, wilcoxon p {:.2e}",
            ld.mre_single,
            dd.mre_single,
            ld.mre_selfloop,
            dd.mre_selfloop,
            ld.physics_selfloop,
            dd.physics_selfloop,
            wilcoxon.p_value
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 6: MPC with the exact-dynamics predictor
// ---------------------------------------------------------------------------

fn settling_time(run: &ClosedLoopRun, q_ref: Quaternion, threshold: f64) -> Option<f64> {
    let series = ape(&run.trajectory, q_ref);
    // first time after which the error stays below threshold
    let mut settle = None;
    for i in 0..series.times.len() {
        if series.quat_err_norm[i] < threshold {
            if settle.is_none() {
                settle = Some(series.times[i]);
            }
        } else {
            settle = None;
        }
    }
    settle
}

#[test]
fn criterion_6_mpc_exact_model() {
    let p = SpacecraftParams::reference();
    let model = MpcModel::exact(&p);
    let q_ref = Quaternion::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2);
    let x0 = BodyState::at_rest(Quaternion::identity());
    let run = closed_loop(
        &model,
        &p,
        &x0,
        q_ref,
        &ClosedLoopConfig::default(),
        &MpcConfig::default(),
        |s, _| *s,
    )
    .unwrap();
    let settle = settling_time(&run, q_ref, 0.01);
    let torque_ok = run
        .trajectory
        .torques
        .iter()
        .all(|u| u.abs_max() <= 0.05 + 1e-12);
    let pass = settle.map(|t| t < 100.0).unwrap_or(false) && torque_ok;
    check(
        "6",
        "exact-model MPC settles",
        pass,
        format!(
            "settling time {:?} s (limit 100), torques bounded {torque_ok}",
            settle
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 7: MPC with the trained models
// ---------------------------------------------------------------------------

fn attitude_spe_mean_abs(run: &ClosedLoopRun, q_ref: Quaternion) -> f64 {
    let series = ape(&run.trajectory, q_ref);
    let axes: Vec<Vec<f64>> = (0..4)
        .map(|a| series.quat_err.iter().map(|q| q[a]).collect())
        .collect();
    spe(&axes, &series.times, 10.0, 120.0, 0.1).unwrap().mean_abs
}

#[test]
fn criterion_7_mpc_learned_models() {
    let m = &*MANEUVER;
    let settle = settling_time(&m.ld_run, m.q_ref, 0.01);
    let ld_spe = attitude_spe_mean_abs(&m.ld_run, m.q_ref);
    let dd_spe = attitude_spe_mean_abs(&m.dd_run, m.q_ref);
    let pass = settle.map(|t| t < 150.0).unwrap_or(false) && ld_spe <= dd_spe;
    check(
        "7",
        "learned-model MPC settles and is stabler",
        pass,
        format!(
            "ld settling {:?} s (limit 150), mean |SPE| ld {:.3e} vs dd {:.3e}",
            settle, ld_spe, dd_spe
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 8: robustness Monte Carlo
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_robustness_monte_carlo() {
    let a = &*ARTIFACTS;
    let q_ref = Quaternion::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2);
    let x0 = BodyState::at_rest(Quaternion::identity());
    // the maneuver settles by ~100 s; 180 s keeps the Monte Carlo tractable
    let cl_cfg = ClosedLoopConfig {
        duration: 180.0,
        ..ClosedLoopConfig::default()
    };
    let mpc_cfg = MpcConfig::default();

    eprintln!("[robustness] 10 noisy runs with the ld model");
    let ld_model = MpcModel::learned_stored(&a.ld);
    let ld = robustness_experiment(
        &ld_model,
        &a.nominal,
        &x0,
        q_ref,
        &cl_cfg,
        &mpc_cfg,
        10,
        0.10,
        NoiseKind::Multiplicative,
        DATA_SEED,
    )
    .unwrap();
    eprintln!("[robustness] 10 noisy runs with the dd model");
    let dd_model = MpcModel::learned_stored(&a.dd);
    let dd = robustness_experiment(
        &dd_model,
        &a.nominal,
        &x0,
        q_ref,
        &cl_cfg,
        &mpc_cfg,
        10,
        0.10,
        NoiseKind::Multiplicative,
        DATA_SEED,
    )
    .unwrap();

    // zero-noise configuration has exactly zero spread (cheap scenario)
    let zero_cfg = ClosedLoopConfig {
        duration: 5.0,
        sim_dt: 0.01,
        ..ClosedLoopConfig::default()
    };
    let zero = robustness_experiment(
        &MpcModel::exact(&a.nominal),
        &a.nominal,
        &x0,
        q_ref,
        &zero_cfg,
        &MpcConfig {
            solver_iterations: 5,
            ..MpcConfig::default()
        },
        3,
        0.0,
        NoiseKind::Multiplicative,
        7,
    )
    .unwrap();

    let pass = ld.attitude.spread <= dd.attitude.spread
        && ld.attitude.final_error <= dd.attitude.final_error
        && zero.attitude.spread == 0.0
        && zero.torque.spread == 0.0;
    check(
        "8",
        "noise robustness ordering",
        pass,
        format!(
            "attitude spread ld {:.3e} vs dd {:.3e}, final error ld {:.3e} vs dd {:.3e}, \
             zero-noise spread {:.1e}",
            ld.attitude.spread,
            dd.attitude.spread,
            ld.attitude.final_error,
            dd.attitude.final_error,
            zero.attitude.spread
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 9: performance
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_performance() {
    let a = &*ARTIFACTS;
    let m = &*MANEUVER;
    let predictor = ConditionedModel::stored(&a.ld);
    let sample = &a.test_ds.samples[0];
    // warm up, then time single-step inferences
    for _ in 0..10 {
        predictor.predict_delta_raw(&sample.input).unwrap();
    }
    let started = Instant::now();
    let n = 200;
    for _ in 0..n {
        predictor.predict_delta_raw(&sample.input).unwrap();
    }
    let per_call_ms = started.elapsed().as_secs_f64() * 1e3 / n as f64;

    let pass = per_call_ms < 5.0 && m.ld_wall_s < 600.0;
    check(
        "9",
        "inference and closed-loop runtime",
        pass,
        format!(
            "inference {per_call_ms:.3} ms (limit 5), 360 s closed loop {:.0} s (limit 600)",
            m.ld_wall_s
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 10: determinism of every stage
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_determinism() {
    let p = SpacecraftParams::reference();

    // dataset stage
    let mut sim_cfg = SimConfig::new(p, 99);
    sim_cfg.duration = 6.0;
    sim_cfg.sim_dt = 0.01;
    let d1 = generate_dataset(&sim_cfg, 2, 4).unwrap();
    let d2 = generate_dataset(&sim_cfg, 2, 4).unwrap();
    let dataset_ok = d1 == d2;

    // simulation stage
    let t1 = run_maneuver(&sim_cfg, Quaternion::identity()).unwrap();
    let t2 = run_maneuver(&sim_cfg, Quaternion::identity()).unwrap();
    let sim_ok = t1 == t2;

    // training stage (tiny model, few epochs)
    let model_cfg = ModelConfig {
        coupling_layers: 2,
        hidden_layers: 1,
        hidden_units: 8,
        steps: d1.steps,
        head: Head::AttnTorque,
        token_dim: 4,
        scale_clamp: 2.0,
        seed: 4,
    };
    let train_cfg = TrainConfig {
        batch_size: 64,
        max_epochs: 3,
        patience: 5,
        validation_fraction: 0.3,
        seed: 8,
        ..TrainConfig::default()
    };
    let cond = conditioning(&d1.params);
    let (m1, _) = fit(
        FlowModel::new(model_cfg, d1.normalization, cond).unwrap(),
        &d1,
        &train_cfg,
    )
    .unwrap();
    let (m2, _) = fit(
        FlowModel::new(model_cfg, d1.normalization, cond).unwrap(),
        &d1,
        &train_cfg,
    )
    .unwrap();
    let train_ok = m1 == m2;

    // solver and closed-loop stage
    let model = MpcModel::exact(&p);
    let q_ref = Quaternion::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), 0.3);
    let x0 = BodyState::at_rest(Quaternion::identity());
    let mpc_cfg = MpcConfig {
        solver_iterations: 10,
        ..MpcConfig::default()
    };
    let p1 = solve(&model, &x0, q_ref, &mpc_cfg, &p, None, Vec3::zero()).unwrap();
    let p2 = solve(&model, &x0, q_ref, &mpc_cfg, &p, None, Vec3::zero()).unwrap();
    let cl_cfg = ClosedLoopConfig {
        duration: 2.0,
        sim_dt: 0.01,
        ..ClosedLoopConfig::default()
    };
    let r1 = closed_loop(&model, &p, &x0, q_ref, &cl_cfg, &mpc_cfg, |s, _| *s).unwrap();
    let r2 = closed_loop(&model, &p, &x0, q_ref, &cl_cfg, &mpc_cfg, |s, _| *s).unwrap();
    let mpc_ok = p1 == p2 && r1 == r2;

    // robustness stage
    let rb1 = robustness_experiment(
        &model, &p, &x0, q_ref, &cl_cfg, &mpc_cfg, 3, 0.1, NoiseKind::Multiplicative, 5,
    )
    .unwrap();
    let rb2 = robustness_experiment(
        &model, &p, &x0, q_ref, &cl_cfg, &mpc_cfg, 3, 0.1, NoiseKind::Multiplicative, 5,
    )
    .unwrap();
    let robust_ok = rb1 == rb2;

    check(
        "10",
        "stage determinism",
        dataset_ok && sim_ok && train_ok && mpc_ok && robust_ok,
        format!(
            "dataset {dataset_ok}, simulation {sim_ok}, training {train_ok}, \
             mpc {mpc_ok}, robustness {robust_ok}"
        ),
    );
}
