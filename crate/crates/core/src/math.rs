//! Fixed-size vector, matrix, and quaternion primitives.
//!
//! All types are plain `f64` aggregates with value semantics. Quaternions are
//! scalar-first `(q0, q1, q2, q3)`, right-handed, body-to-inertial.

use std::ops::{Add, Mul, Neg, Sub};

/// 3-component column vector. Units depend on context (rad/s, N·m, ...).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub const fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, other: Self) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Self) -> Self {
        Self::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    /// Component-wise clamp to `[-bound, bound]`.
    pub fn clamp_abs(self, bound: f64) -> Self {
        Self::new(
            self.x.clamp(-bound, bound),
            self.y.clamp(-bound, bound),
            self.z.clamp(-bound, bound),
        )
    }

    pub fn abs_max(self) -> f64 {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, rhs: Vec3) -> Vec3 {
        Vec3::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, rhs: Vec3) -> Vec3 {
        Vec3::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, rhs: f64) -> Vec3 {
        Vec3::new(self.x * rhs, self.y * rhs, self.z * rhs)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// 3×3 matrix, row-major storage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Matrix3 {
    pub m: [f64; 9],
}

impl Matrix3 {
    pub const fn from_rows(r0: [f64; 3], r1: [f64; 3], r2: [f64; 3]) -> Self {
        Self {
            m: [
                r0[0], r0[1], r0[2], r1[0], r1[1], r1[2], r2[0], r2[1], r2[2],
            ],
        }
    }

    pub const fn zeros() -> Self {
        Self { m: [0.0; 9] }
    }

    pub const fn identity() -> Self {
        Self::from_rows([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0])
    }

    pub const fn diagonal(d0: f64, d1: f64, d2: f64) -> Self {
        Self::from_rows([d0, 0.0, 0.0], [0.0, d1, 0.0], [0.0, 0.0, d2])
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.m[row * 3 + col]
    }

    pub fn diagonal_entries(&self) -> [f64; 3] {
        [self.m[0], self.m[4], self.m[8]]
    }

    pub fn transpose(&self) -> Matrix3 {
        let m = &self.m;
        Matrix3 {
            m: [m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]],
        }
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.m;
        Vec3::new(
            m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z,
        )
    }

    pub fn mul_mat(&self, other: &Matrix3) -> Matrix3 {
        let mut out = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += self.at(i, k) * other.at(k, j);
                }
                out[i * 3 + j] = acc;
            }
        }
        Matrix3 { m: out }
    }

    pub fn scale(&self, s: f64) -> Matrix3 {
        let mut m = self.m;
        for v in &mut m {
            *v *= s;
        }
        Matrix3 { m }
    }

    pub fn sub(&self, other: &Matrix3) -> Matrix3 {
        let mut m = self.m;
        for (v, o) in m.iter_mut().zip(other.m.iter()) {
            *v -= o;
        }
        Matrix3 { m }
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.m;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    /// Inverse via the adjugate. Returns `None` when the determinant is
    /// smaller than `1e-300` in magnitude.
    pub fn inverse(&self) -> Option<Matrix3> {
        let det = self.determinant();
        if det.abs() < 1e-300 {
            return None;
        }
        let m = &self.m;
        let inv_det = 1.0 / det;
        let adj = [
            m[4] * m[8] - m[5] * m[7],
            m[2] * m[7] - m[1] * m[8],
            m[1] * m[5] - m[2] * m[4],
            m[5] * m[6] - m[3] * m[8],
            m[0] * m[8] - m[2] * m[6],
            m[2] * m[3] - m[0] * m[5],
            m[3] * m[7] - m[4] * m[6],
            m[1] * m[6] - m[0] * m[7],
            m[0] * m[4] - m[1] * m[3],
        ];
        let mut out = [0.0; 9];
        for (o, a) in out.iter_mut().zip(adj.iter()) {
            *o = a * inv_det;
        }
        Some(Matrix3 { m: out })
    }

    /// Solve `self * x = b` for x via the precomputed inverse path.
    pub fn solve(&self, b: Vec3) -> Option<Vec3> {
        self.inverse().map(|inv| inv.mul_vec(b))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.m.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius-norm condition estimate `‖A‖_F · ‖A⁻¹‖_F`.
    pub fn condition_estimate(&self) -> f64 {
        match self.inverse() {
            Some(inv) => self.frobenius_norm() * inv.frobenius_norm(),
            None => f64::INFINITY,
        }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (self.m[1] - self.m[3]).abs() <= tol
            && (self.m[2] - self.m[6]).abs() <= tol
            && (self.m[5] - self.m[7]).abs() <= tol
    }

    /// Symmetric positive definite check via leading principal minors.
    pub fn is_spd(&self, sym_tol: f64) -> bool {
        if !self.is_symmetric(sym_tol) {
            return false;
        }
        let m = &self.m;
        let d1 = m[0];
        let d2 = m[0] * m[4] - m[1] * m[3];
        let d3 = self.determinant();
        d1 > 0.0 && d2 > 0.0 && d3 > 0.0
    }

    pub fn is_diagonal(&self, tol: f64) -> bool {
        self.m[1].abs() <= tol
            && self.m[2].abs() <= tol
            && self.m[3].abs() <= tol
            && self.m[5].abs() <= tol
            && self.m[6].abs() <= tol
            && self.m[7].abs() <= tol
    }
}

/// Unit quaternion, scalar-first `(q0, q1, q2, q3)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub q0: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
}

impl Quaternion {
    pub const fn new(q0: f64, q1: f64, q2: f64, q3: f64) -> Self {
        Self { q0, q1, q2, q3 }
    }

    pub const fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0)
    }

    /// `axis` must be unit length; `angle` in radians.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let half = 0.5 * angle;
        let s = half.sin();
        Self::new(half.cos(), axis.x * s, axis.y * s, axis.z * s)
    }

    pub fn norm(self) -> f64 {
        (self.q0 * self.q0 + self.q1 * self.q1 + self.q2 * self.q2 + self.q3 * self.q3).sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        Self::new(self.q0 / n, self.q1 / n, self.q2 / n, self.q3 / n)
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.q0, -self.q1, -self.q2, -self.q3)
    }

    pub fn dot(self, other: Self) -> f64 {
        self.q0 * other.q0 + self.q1 * other.q1 + self.q2 * other.q2 + self.q3 * other.q3
    }

    pub fn negated(self) -> Self {
        Self::new(-self.q0, -self.q1, -self.q2, -self.q3)
    }

    /// Hamilton product `self ⊗ other`.
    pub fn multiply(self, o: Self) -> Self {
        Self::new(
            self.q0 * o.q0 - self.q1 * o.q1 - self.q2 * o.q2 - self.q3 * o.q3,
            self.q0 * o.q1 + self.q1 * o.q0 + self.q2 * o.q3 - self.q3 * o.q2,
            self.q0 * o.q2 - self.q1 * o.q3 + self.q2 * o.q0 + self.q3 * o.q1,
            self.q0 * o.q3 + self.q1 * o.q2 - self.q2 * o.q1 + self.q3 * o.q0,
        )
    }

    /// Rotate a body-frame vector into the inertial frame.
    pub fn rotate(self, v: Vec3) -> Vec3 {
        let p = Quaternion::new(0.0, v.x, v.y, v.z);
        let r = self.multiply(p).multiply(self.conjugate());
        Vec3::new(r.q1, r.q2, r.q3)
    }

    /// Rotate an inertial-frame vector into the body frame.
    pub fn rotate_inverse(self, v: Vec3) -> Vec3 {
        self.conjugate().rotate(v)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.q0, self.q1, self.q2, self.q3]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(self) -> bool {
        self.q0.is_finite() && self.q1.is_finite() && self.q2.is_finite() && self.q3.is_finite()
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(self) -> f64 {
        2.0 * self.q0.abs().min(1.0).acos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_product_basis() {
        let x = Vec3::new(1.0, 0.0, 0.0);
        let y = Vec3::new(0.0, 1.0, 0.0);
        assert_eq!(x.cross(y), Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn matrix_inverse_roundtrip() {
        let a = Matrix3::from_rows([5.7, 0.045, 0.002], [0.045, 3.3, 0.012], [0.002, 0.012, 6.1]);
        let inv = a.inverse().unwrap();
        let prod = a.mul_mat(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((prod.at(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn solve_matches_inverse() {
        let a = Matrix3::from_rows([2.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 4.0]);
        let b = Vec3::new(1.0, -2.0, 0.25);
        let x = a.solve(b).unwrap();
        let back = a.mul_vec(x);
        assert!((back - b).norm() < 1e-12);
    }

    #[test]
    fn spd_detection() {
        assert!(Matrix3::diagonal(1.0, 2.0, 3.0).is_spd(1e-12));
        assert!(!Matrix3::diagonal(1.0, -2.0, 3.0).is_spd(1e-12));
        let asym = Matrix3::from_rows([1.0, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]);
        assert!(!asym.is_spd(1e-12));
    }

    #[test]
    fn quaternion_rotation_about_z() {
        let q = Quaternion::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2);
        let v = q.rotate(Vec3::new(1.0, 0.0, 0.0));
        assert!((v - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        let back = q.rotate_inverse(v);
        assert!((back - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn quaternion_product_norm() {
        let a = Quaternion::new(0.5, 0.5, 0.5, 0.5);
        let b = Quaternion::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), 0.3);
        assert!((a.multiply(b).norm() - 1.0).abs() < 1e-12);
    }
}
