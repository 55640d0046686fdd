use satflow::dynamics::{BodyState, SpacecraftParams};
use satflow::evaluation::ape;
use satflow::math::{Quaternion, Vec3};
use satflow::mpc::{closed_loop, ClosedLoopConfig, MpcConfig, MpcModel};
use std::time::Instant;

fn settle(run: &satflow::mpc::ClosedLoopRun, q_ref: Quaternion) -> Option<f64> {
    let s = ape(&run.trajectory, q_ref);
    let mut t = None;
    for i in 0..s.times.len() {
        if s.quat_err_norm[i] < 0.01 {
            if t.is_none() { t = Some(s.times[i]); }
        } else { t = None; }
    }
    t
}

fn main() {
    let p = SpacecraftParams::reference();
    let model = MpcModel::exact(&p);
    let q_ref = Quaternion::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2);
    let x0 = BodyState::at_rest(Quaternion::identity());
    let cl = ClosedLoopConfig { duration: 200.0, ..Default::default() };

    for (iters, step) in [(50usize, 5e-3), (50, 1e-2), (100, 5e-3), (100, 1e-2), (150, 1e-2), (50, 2e-2)] {
        let cfg = MpcConfig { solver_iterations: iters, solver_step: step, ..Default::default() };
        let t0 = Instant::now();
        let run = closed_loop(&model, &p, &x0, q_ref, &cl, &cfg, |s, _| *s).unwrap();
        println!(
            "iters {iters:3} step {step:5}: settle {:?} s  (wall {:.0} s)",
            settle(&run, q_ref),
            t0.elapsed().as_secs_f64()
        );
    }
}
