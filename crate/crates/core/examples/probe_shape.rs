use satflow::dynamics::{BodyState, SpacecraftParams};
use satflow::evaluation::ape;
use satflow::math::{Quaternion, Vec3};
use satflow::mpc::{closed_loop, ClosedLoopConfig, MpcConfig, MpcModel};

fn main() {
    let p = SpacecraftParams::reference();
    let model = MpcModel::exact(&p);
    let q_ref = Quaternion::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2);
    let x0 = BodyState::at_rest(Quaternion::identity());
    let cl = ClosedLoopConfig { duration: 160.0, ..Default::default() };
    let cfg = MpcConfig::default();
    let run = closed_loop(&model, &p, &x0, q_ref, &cl, &cfg, |s, _| *s).unwrap();
    let s = ape(&run.trajectory, q_ref);
    for i in (0..s.times.len()).step_by(50) {
        let st = &run.trajectory.states[i];
        println!(
            "t={:5.1}  |e_q|={:9.3e}  wz={:8.4}  uz={:8.4}  wrw_z={:7.1}",
            s.times[i], s.quat_err_norm[i], st.omega.z, run.trajectory.torques[i].z, st.omega_rw.z
        );
    }
}
