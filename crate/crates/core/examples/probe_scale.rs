use satflow::dynamics::{BodyState, SpacecraftParams};
use satflow::evaluation::ape;
use satflow::math::{Quaternion, Vec3};
use satflow::mpc::{closed_loop, ClosedLoopConfig, MpcConfig, MpcModel};

fn main() {
    let p = SpacecraftParams::reference();
    let model = MpcModel::exact(&p);
    let q_ref = Quaternion::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2);
    let x0 = BodyState::at_rest(Quaternion::identity());
    let cl = ClosedLoopConfig { duration: 150.0, ..Default::default() };
    for scale in [1.0, 1.2, 1.4, 1.7, 2.0, 2.5] {
        let cfg = MpcConfig { wheel_speed_scale: scale, ..Default::default() };
        let run = closed_loop(&model, &p, &x0, q_ref, &cl, &cfg, |s, _| *s).unwrap();
        let s = ape(&run.trajectory, q_ref);
        let mut settle = None;
        let mut peak_after = 0.0f64;
        for i in 0..s.times.len() {
            if s.quat_err_norm[i] < 0.01 {
                if settle.is_none() { settle = Some(s.times[i]); }
            } else {
                settle = None;
            }
            if s.times[i] > 40.0 {
                peak_after = peak_after.max(s.quat_err_norm[i]);
            }
        }
        println!("scale {scale:4}: settle {settle:?} s, max |e| after 40 s = {peak_after:.3}");
    }
}
