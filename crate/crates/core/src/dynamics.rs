//! Rigid-body attitude dynamics with reaction-wheel coupling.
//!
//! Body angular acceleration comes from the coupled wheel/body momentum
//! balance: substituting the wheel reaction torque into the body equation
//! gives `(I_s − I_rw)·ω̇ = −S(ω)(I_s·ω + I_rw·ω_rw) − u_rw + N_e`, which is
//! solved exactly per call. All functions here are pure; the RK4 step holds
//! the wheel torque and external torque constant over the step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Matrix3, Quaternion, Vec3};

/// Maximum accepted Frobenius condition estimate for `I_s − I_rw`.
const MAX_CONDITION: f64 = 1e12;

/// Inertia, mass, and actuator limits of a wheel-actuated spacecraft.
///
/// Three reaction wheels with spin axes aligned to the body axes; `u_rw` is
/// the 3-vector of wheel motor torques. Constructed through [`SpacecraftParams::new`],
/// which validates the inertia matrices and caches the inverses used in the
/// dynamics, so the per-call operations are total functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpacecraftParams {
    pub inertia_body: Matrix3,
    pub inertia_wheels: Matrix3,
    pub mass: f64,
    pub max_wheel_torque: f64,
    pub max_wheel_speed: f64,
    pub control_dt: f64,
    inertia_body_inv: Matrix3,
    wheel_inv_diag: Vec3,
    body_minus_wheels_inv: Matrix3,
}

impl SpacecraftParams {
    pub fn new(
        inertia_body: Matrix3,
        inertia_wheels: Matrix3,
        mass: f64,
        max_wheel_torque: f64,
        max_wheel_speed: f64,
        control_dt: f64,
    ) -> Result<Self> {
        if !inertia_body.is_spd(1e-9) {
            return Err(Error::InvalidParams(
                "body inertia must be symmetric positive definite".into(),
            ));
        }
        if !inertia_wheels.is_diagonal(0.0) {
            return Err(Error::InvalidParams("wheel inertia must be diagonal".into()));
        }
        let wd = inertia_wheels.diagonal_entries();
        if wd.iter().any(|&d| d <= 0.0) {
            return Err(Error::InvalidParams(
                "wheel inertia diagonal entries must be positive".into(),
            ));
        }
        if mass <= 0.0 {
            return Err(Error::InvalidParams("mass must be positive".into()));
        }
        if max_wheel_torque <= 0.0 {
            return Err(Error::InvalidParams("max wheel torque must be positive".into()));
        }
        if max_wheel_speed <= 0.0 {
            return Err(Error::InvalidParams("max wheel speed must be positive".into()));
        }
        if control_dt <= 0.0 {
            return Err(Error::InvalidParams("control_dt must be positive".into()));
        }
        let coupled = inertia_body.sub(&inertia_wheels);
        if coupled.condition_estimate() > MAX_CONDITION {
            return Err(Error::InvalidParams(
                "body minus wheel inertia is singular or near-singular".into(),
            ));
        }
        let inertia_body_inv = inertia_body
            .inverse()
            .ok_or_else(|| Error::InvalidParams("body inertia not invertible".into()))?;
        let body_minus_wheels_inv = coupled
            .inverse()
            .ok_or_else(|| Error::InvalidParams("body minus wheel inertia not invertible".into()))?;
        Ok(Self {
            inertia_body,
            inertia_wheels,
            mass,
            max_wheel_torque,
            max_wheel_speed,
            control_dt,
            inertia_body_inv,
            wheel_inv_diag: Vec3::new(1.0 / wd[0], 1.0 / wd[1], 1.0 / wd[2]),
            body_minus_wheels_inv,
        })
    }

    /// The 58 kg reference satellite used throughout the test configurations:
    /// mildly anisotropic body inertia, 1e-3 kg·m² wheels, 0.05 N·m torque
    /// limit, 6000 rpm wheel-speed limit, 0.1 s control period.
    pub fn reference() -> Self {
        Self::new(
            Matrix3::from_rows(
                [5.700, 0.045, 0.002],
                [0.045, 3.300, 0.012],
                [0.002, 0.012, 6.100],
            ),
            Matrix3::diagonal(0.001, 0.001, 0.001),
            58.0,
            0.05,
            rpm_to_rad_s(6000.0),
            0.1,
        )
        .expect("reference parameters are valid")
    }

    /// Same spacecraft with the body inertia and mass scaled by `factor`,
    /// modelling an estimation error on those parameters.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.inertia_body.scale(factor),
            self.inertia_wheels,
            self.mass * factor,
            self.max_wheel_torque,
            self.max_wheel_speed,
            self.control_dt,
        )
    }

    pub fn inertia_body_inv(&self) -> &Matrix3 {
        &self.inertia_body_inv
    }

    /// Reciprocals of the wheel-inertia diagonal.
    pub fn wheel_inv_diag(&self) -> Vec3 {
        self.wheel_inv_diag
    }

    /// Cached `(I_s − I_rw)⁻¹`.
    pub fn body_minus_wheels_inv(&self) -> &Matrix3 {
        &self.body_minus_wheels_inv
    }
}

pub fn rpm_to_rad_s(rpm: f64) -> f64 {
    rpm * std::f64::consts::PI / 30.0
}

pub fn rad_s_to_rpm(rad_s: f64) -> f64 {
    rad_s * 30.0 / std::f64::consts::PI
}

/// Simulator / controller state: attitude, body rates, wheel rates, and the
/// body angular acceleration at the most recent step start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyState {
    pub attitude: Quaternion,
    pub omega: Vec3,
    pub omega_rw: Vec3,
    pub omega_dot: Vec3,
}

impl BodyState {
    pub fn at_rest(attitude: Quaternion) -> Self {
        Self {
            attitude,
            omega: Vec3::zero(),
            omega_rw: Vec3::zero(),
            omega_dot: Vec3::zero(),
        }
    }
}

/// Cross-product matrix: `skew(w)·v = w × v`.
pub fn skew(w: Vec3) -> Matrix3 {
    Matrix3::from_rows([0.0, -w.z, w.y], [w.z, 0.0, -w.x], [-w.y, w.x, 0.0])
}

/// Body angular acceleration from the coupled wheel/body momentum balance,
/// solving `(I_s − I_rw)·ω̇ = −S(ω)(I_s·ω + I_rw·ω_rw) − u_rw + n_ext`.
pub fn angular_acceleration(
    p: &SpacecraftParams,
    omega: Vec3,
    omega_rw: Vec3,
    u_rw: Vec3,
    n_ext: Vec3,
) -> Vec3 {
    let momentum = p.inertia_body.mul_vec(omega) + p.inertia_wheels.mul_vec(omega_rw);
    let rhs = -omega.cross(momentum) - u_rw + n_ext;
    p.body_minus_wheels_inv.mul_vec(rhs)
}

/// Wheel angular acceleration `I_rw⁻¹·u_rw − ω̇`.
pub fn wheel_acceleration(p: &SpacecraftParams, u_rw: Vec3, omega_dot: Vec3) -> Vec3 {
    let inv = p.wheel_inv_diag();
    Vec3::new(
        inv.x * u_rw.x - omega_dot.x,
        inv.y * u_rw.y - omega_dot.y,
        inv.z * u_rw.z - omega_dot.z,
    )
}

/// Quaternion kinematics `q̇ = ½·Ω(ω)·q` with the 4×4 skew-symmetric rate
/// matrix built from the body rates. Returned as a (non-unit) quaternion rate.
pub fn quaternion_derivative(q: Quaternion, omega: Vec3) -> Quaternion {
    let (wx, wy, wz) = (omega.x, omega.y, omega.z);
    Quaternion::new(
        0.5 * (-q.q1 * wx - q.q2 * wy - q.q3 * wz),
        0.5 * (q.q0 * wx + q.q2 * wz - q.q3 * wy),
        0.5 * (q.q0 * wy - q.q1 * wz + q.q3 * wx),
        0.5 * (q.q0 * wz + q.q1 * wy - q.q2 * wx),
    )
}

/// Total angular momentum `I_s·ω + I_rw·ω_rw`, body frame.
pub fn total_angular_momentum(p: &SpacecraftParams, omega: Vec3, omega_rw: Vec3) -> Vec3 {
    p.inertia_body.mul_vec(omega) + p.inertia_wheels.mul_vec(omega_rw)
}

/// Gravity-gradient torque `3n²·(ô × I_s·ô)` for a unit nadir direction `ô`
/// expressed in the body frame and circular-orbit rate `n`.
pub fn gravity_gradient_torque(
    p: &SpacecraftParams,
    nadir_body: Vec3,
    orbital_rate: f64,
) -> Result<Vec3> {
    if (nadir_body.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "nadir direction must be a unit vector, got norm {}",
            nadir_body.norm()
        )));
    }
    if orbital_rate <= 0.0 {
        return Err(Error::InvalidArgument("orbital rate must be positive".into()));
    }
    let scale = 3.0 * orbital_rate * orbital_rate;
    Ok(nadir_body.cross(p.inertia_body.mul_vec(nadir_body)) * scale)
}

/// External-torque model slot used by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Disturbance {
    None,
    /// Gravity-gradient torque on a circular orbit in the inertial x-y plane,
    /// with nadir rotating at `orbital_rate` rad/s.
    GravityGradient { orbital_rate: f64 },
}

impl Disturbance {
    /// Torque at attitude `q` and time `t` (seconds since simulation start).
    pub fn torque(&self, p: &SpacecraftParams, q: Quaternion, t: f64) -> Vec3 {
        match *self {
            Disturbance::None => Vec3::zero(),
            Disturbance::GravityGradient { orbital_rate } => {
                let angle = orbital_rate * t;
                let nadir_inertial = Vec3::new(-angle.cos(), -angle.sin(), 0.0);
                let nadir_body = q.rotate_inverse(nadir_inertial);
                // Attitude is unit-norm by invariant; renormalize defensively
                // only through the formula's own normalization-free cross.
                gravity_gradient_torque(p, nadir_body * (1.0 / nadir_body.norm()), orbital_rate)
                    .unwrap_or(Vec3::zero())
            }
        }
    }
}

#[derive(Clone, Copy)]
struct Derivative {
    q_dot: Quaternion,
    omega_dot: Vec3,
    omega_rw_dot: Vec3,
}

fn derivative(p: &SpacecraftParams, q: Quaternion, omega: Vec3, omega_rw: Vec3, u_rw: Vec3, n_ext: Vec3) -> Derivative {
    let omega_dot = angular_acceleration(p, omega, omega_rw, u_rw, n_ext);
    Derivative {
        q_dot: quaternion_derivative(q, omega),
        omega_dot,
        omega_rw_dot: wheel_acceleration(p, u_rw, omega_dot),
    }
}

/// One classical RK4 step of the joint (attitude, body-rate, wheel-rate) ODE
/// with `u_rw` and `n_ext` held constant over the step. The output attitude
/// is renormalized and `omega_dot` is the acceleration at the step start.
pub fn rk4_step(p: &SpacecraftParams, s: &BodyState, u_rw: Vec3, n_ext: Vec3, dt: f64) -> BodyState {
    let q = s.attitude;
    let w = s.omega;
    let wr = s.omega_rw;

    let k1 = derivative(p, q, w, wr, u_rw, n_ext);
    let half = 0.5 * dt;
    let k2 = derivative(
        p,
        quat_axpy(q, k1.q_dot, half),
        w + k1.omega_dot * half,
        wr + k1.omega_rw_dot * half,
        u_rw,
        n_ext,
    );
    let k3 = derivative(
        p,
        quat_axpy(q, k2.q_dot, half),
        w + k2.omega_dot * half,
        wr + k2.omega_rw_dot * half,
        u_rw,
        n_ext,
    );
    let k4 = derivative(
        p,
        quat_axpy(q, k3.q_dot, dt),
        w + k3.omega_dot * dt,
        wr + k3.omega_rw_dot * dt,
        u_rw,
        n_ext,
    );

    let sixth = dt / 6.0;
    let q_new = Quaternion::new(
        q.q0 + sixth * (k1.q_dot.q0 + 2.0 * k2.q_dot.q0 + 2.0 * k3.q_dot.q0 + k4.q_dot.q0),
        q.q1 + sixth * (k1.q_dot.q1 + 2.0 * k2.q_dot.q1 + 2.0 * k3.q_dot.q1 + k4.q_dot.q1),
        q.q2 + sixth * (k1.q_dot.q2 + 2.0 * k2.q_dot.q2 + 2.0 * k3.q_dot.q2 + k4.q_dot.q2),
        q.q3 + sixth * (k1.q_dot.q3 + 2.0 * k2.q_dot.q3 + 2.0 * k3.q_dot.q3 + k4.q_dot.q3),
    );
    let omega_new =
        w + (k1.omega_dot + k2.omega_dot * 2.0 + k3.omega_dot * 2.0 + k4.omega_dot) * sixth;
    let omega_rw_new = wr
        + (k1.omega_rw_dot + k2.omega_rw_dot * 2.0 + k3.omega_rw_dot * 2.0 + k4.omega_rw_dot)
            * sixth;

    BodyState {
        attitude: q_new.normalized(),
        omega: omega_new,
        omega_rw: omega_rw_new,
        omega_dot: k1.omega_dot,
    }
}

fn quat_axpy(q: Quaternion, rate: Quaternion, dt: f64) -> Quaternion {
    Quaternion::new(
        q.q0 + rate.q0 * dt,
        q.q1 + rate.q1 * dt,
        q.q2 + rate.q2 * dt,
        q.q3 + rate.q3 * dt,
    )
}
