//! Quaternion algebra: Hamilton product, conjugation, unit rotors built from
//! an (angle, axis) parameterization, rotation of pure quaternions, and the
//! real 4x4 embeddings used to batch vote computation as matrix products.
//!
//! Rotors are written `[cos θ, sin θ · axis]` without the customary half
//! angle, so a rotor with angle `θ` turns a pure quaternion by `2θ`.

use std::ops::{Mul, Neg};

use crate::error::{Error, Result};
use crate::real::Real;

/// Below this axis norm a [`RotorWeight`] cannot be normalized.
pub const AXIS_FLOOR: f64 = 1e-8;

/// Largest tolerated deviation of a rotor's norm from 1 in [`rotate`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// `w + x i + y j + z k`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Quaternion<T> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

/// A quaternion whose scalar part is zero; poses and votes live here.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PureQuaternion<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

/// Learnable rotor parameters: an unconstrained angle and an unnormalized axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotorWeight<T> {
    pub theta: T,
    pub axis: [T; 3],
}

/// Row-major 4x4 real matrix acting on `[w, x, y, z]` column vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuatMatrix4<T>(pub [[T; 4]; 4]);

impl<T: Real> Quaternion<T> {
    pub fn new(w: T, x: T, y: T, z: T) -> Self {
        Quaternion { w, x, y, z }
    }

    pub fn identity() -> Self {
        Self::new(T::one(), T::zero(), T::zero(), T::zero())
    }

    pub fn from_array(v: [T; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [T; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn vector(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn norm_squared(self) -> T {
        self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z
    }

    pub fn norm(self) -> T {
        self.norm_squared().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// `self * other`: scalar `s_q s_p - <v_q, v_p>`, vector
    /// `s_q v_p + s_p v_q + v_q x v_p`.
    pub fn hamilton(self, p: Self) -> Self {
        let q = self;
        Self::new(
            q.w * p.w - (q.x * p.x + q.y * p.y + q.z * p.z),
            q.w * p.x + p.w * q.x + (q.y * p.z - q.z * p.y),
            q.w * p.y + p.w * q.y + (q.z * p.x - q.x * p.z),
            q.w * p.z + p.w * q.z + (q.x * p.y - q.y * p.x),
        )
    }
}

pub fn hamilton_product<T: Real>(q: Quaternion<T>, p: Quaternion<T>) -> Quaternion<T> {
    q.hamilton(p)
}

pub fn conjugate<T: Real>(q: Quaternion<T>) -> Quaternion<T> {
    q.conjugate()
}

impl<T: Real> Mul for Quaternion<T> {
    type Output = Self;

    fn mul(self, rhs: Self) -> Self {
        self.hamilton(rhs)
    }
}

impl<T: Real> Neg for Quaternion<T> {
    type Output = Self;

    fn neg(self) -> Self {
        Self::new(-self.w, -self.x, -self.y, -self.z)
    }
}

impl<T: Real> PureQuaternion<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        PureQuaternion { x, y, z }
    }

    pub fn from_array(v: [T; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn to_quaternion(self) -> Quaternion<T> {
        Quaternion::new(T::zero(), self.x, self.y, self.z)
    }

    pub fn norm(self) -> T {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

impl<T: Real> From<PureQuaternion<T>> for Quaternion<T> {
    fn from(p: PureQuaternion<T>) -> Self {
        p.to_quaternion()
    }
}

impl<T: Real> RotorWeight<T> {
    pub fn new(theta: T, axis: [T; 3]) -> Self {
        RotorWeight { theta, axis }
    }

    pub fn axis_norm(&self) -> T {
        let [a, b, c] = self.axis;
        (a * a + b * b + c * c).sqrt()
    }

    /// The unit rotor `[cos θ, sin θ · axis / ‖axis‖]`.
    pub fn normalize(&self) -> Result<Quaternion<T>> {
        let n = self.axis_norm();
        if !(n.as_f64() >= AXIS_FLOOR) {
            return Err(Error::DegenerateAxis {
                norm: n.as_f64(),
                floor: AXIS_FLOOR,
            });
        }
        let (s, c) = self.theta.sin_cos();
        let k = s / n;
        Ok(Quaternion::new(
            c,
            k * self.axis[0],
            k * self.axis[1],
            k * self.axis[2],
        ))
    }
}

pub fn normalize_rotor<T: Real>(w: &RotorWeight<T>) -> Result<Quaternion<T>> {
    w.normalize()
}

/// `rotor * r * conj(rotor)` for a unit rotor; the scalar part of the product
/// is analytically zero and is dropped.
pub fn rotate<T: Real>(rotor: Quaternion<T>, r: PureQuaternion<T>) -> Result<PureQuaternion<T>> {
    let norm = rotor.norm().as_f64();
    if !((norm - 1.0).abs() <= UNIT_TOLERANCE) {
        return Err(Error::NonUnitRotor {
            norm,
            tolerance: UNIT_TOLERANCE,
        });
    }
    let out = rotor.hamilton(r.to_quaternion()).hamilton(rotor.conjugate());
    debug_assert!(
        out.w.abs().as_f64() <= 1e-10 * T::TOL_SCALE * (1.0 + r.norm().as_f64()),
        "scalar residual {} after rotation",
        out.w
    );
    Ok(PureQuaternion::new(out.x, out.y, out.z))
}

impl<T: Real> QuatMatrix4<T> {
    pub fn identity() -> Self {
        let mut m = [[T::zero(); 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = T::one();
        }
        QuatMatrix4(m)
    }

    pub fn mul_vec(&self, v: [T; 4]) -> [T; 4] {
        let mut out = [T::zero(); 4];
        for (o, row) in out.iter_mut().zip(&self.0) {
            *o = row[0] * v[0] + row[1] * v[1] + row[2] * v[2] + row[3] * v[3];
        }
        out
    }

    pub fn apply(&self, q: Quaternion<T>) -> Quaternion<T> {
        Quaternion::from_array(self.mul_vec(q.to_array()))
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let mut out = [[T::zero(); 4]; 4];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..4).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        QuatMatrix4(out)
    }

    pub fn transpose(&self) -> Self {
        let mut out = [[T::zero(); 4]; 4];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = self.0[j][i];
            }
        }
        QuatMatrix4(out)
    }

    /// The block acting on the imaginary components.
    pub fn rotation_block(&self) -> [[T; 3]; 3] {
        let mut out = [[T::zero(); 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = self.0[i + 1][j + 1];
            }
        }
        out
    }
}

/// Matrix of left multiplication by `q`: `right_embed(q) · vec(p) = vec(q * p)`.
pub fn right_embed<T: Real>(q: Quaternion<T>) -> QuatMatrix4<T> {
    let Quaternion { w, x, y, z } = q;
    QuatMatrix4([
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ])
}

/// Matrix of right multiplication by `q`: `left_embed(q) · vec(p) = vec(p * q)`.
pub fn left_embed<T: Real>(q: Quaternion<T>) -> QuatMatrix4<T> {
    let Quaternion { w, x, y, z } = q;
    QuatMatrix4([
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ])
}

/// Composed operator `M = left_embed(w*) · right_embed(w)`, so that
/// `M · vec(u) = vec(w * u * w*)` for every quaternion `u`.
pub fn rotation_operator<T: Real>(weight: &RotorWeight<T>) -> Result<QuatMatrix4<T>> {
    let rotor = weight.normalize()?;
    Ok(operator_from_rotor(rotor))
}

pub fn operator_from_rotor<T: Real>(rotor: Quaternion<T>) -> QuatMatrix4<T> {
    left_embed(rotor.conjugate()).matmul(&right_embed(rotor))
}

fn det3<T: Real>(m: &[[T; 3]; 3]) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Largest entry of `|BᵀB - I|` and the determinant of a 3x3 block.
pub fn orthogonality_defect<T: Real>(block: &[[T; 3]; 3]) -> (T, T) {
    let mut worst = T::zero();
    for i in 0..3 {
        for j in 0..3 {
            let dot: T = (0..3).map(|k| block[k][i] * block[k][j]).sum();
            let target = if i == j { T::one() } else { T::zero() };
            worst = worst.max((dot - target).abs());
        }
    }
    (worst, det3(block))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, SQRT_2};

    fn q(w: f64, x: f64, y: f64, z: f64) -> Quaternion<f64> {
        Quaternion::new(w, x, y, z)
    }

    #[test]
    fn basis_products() {
        let (one, i, j, k) = (q(1., 0., 0., 0.), q(0., 1., 0., 0.), q(0., 0., 1., 0.), q(0., 0., 0., 1.));
        assert_eq!(i * j, k);
        assert_eq!(j * k, i);
        assert_eq!(k * i, j);
        assert_eq!(j * i, -k);
        assert_eq!(k * j, -i);
        assert_eq!(i * k, -j);
        assert_eq!(i * i, -one);
        assert_eq!(j * j, -one);
        assert_eq!(k * k, -one);
        assert_eq!(i * j * k, -one);
    }

    #[test]
    fn worked_product_and_identity() {
        assert_eq!(q(1., 2., 3., 4.) * q(5., 6., 7., 8.), q(-60., 12., 30., 24.));
        let p = q(0.3, -1.2, 4.0, 2.5);
        assert_eq!(Quaternion::identity() * p, p);
    }

    #[test]
    fn conjugate_examples() {
        assert_eq!(conjugate(q(1., 2., 3., 4.)), q(1., -2., -3., -4.));
        assert_eq!(conjugate(q(1., 0., 0., 0.)), q(1., 0., 0., 0.));
        let h = q(0.5, 0.5, 0.5, 0.5);
        assert_eq!(h * h.conjugate(), q(1., 0., 0., 0.));
    }

    #[test]
    fn normalize_rotor_examples() {
        let r = RotorWeight::new(0.0, [5.0, -2.0, 1.0]).normalize().unwrap();
        assert_eq!(r, q(1., 0., 0., 0.));
        let r = RotorWeight::new(FRAC_PI_2, [2.0, 0.0, 0.0]).normalize().unwrap();
        assert!((r.w).abs() < 1e-16 && (r.x - 1.0).abs() < 1e-16 && r.y == 0.0 && r.z == 0.0);
        let r = RotorWeight::new(FRAC_PI_4, [0.0, 0.0, 3.0]).normalize().unwrap();
        assert!((r.w - SQRT_2 / 2.0).abs() < 1e-15 && (r.z - SQRT_2 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_axis_is_rejected() {
        let err = RotorWeight::new(0.3, [1e-9, 0.0, 0.0]).normalize().unwrap_err();
        assert!(matches!(err, Error::DegenerateAxis { .. }));
        assert!(rotation_operator(&RotorWeight::new(0.3, [0.0f64; 3])).is_err());
    }

    #[test]
    fn rotate_quarter_turn_about_k() {
        let rotor = RotorWeight::new(FRAC_PI_4, [0.0, 0.0, 1.0]).normalize().unwrap();
        let out = rotate(rotor, PureQuaternion::new(1.0, 0.0, 0.0)).unwrap();
        assert!(out.x.abs() < 1e-15 && (out.y - 1.0).abs() < 1e-15 && out.z.abs() < 1e-15);
        let id = rotate(Quaternion::identity(), PureQuaternion::new(1.5, -2.0, 0.25)).unwrap();
        assert_eq!(id, PureQuaternion::new(1.5, -2.0, 0.25));
    }

    #[test]
    fn rotate_rejects_non_unit_rotor() {
        let err = rotate(q(1.0, 0.1, 0.0, 0.0), PureQuaternion::new(1.0, 0.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::NonUnitRotor { .. }));
    }

    #[test]
    fn embeddings() {
        assert_eq!(right_embed(q(1., 0., 0., 0.)), QuatMatrix4::identity());
        assert_eq!(left_embed(q(1., 0., 0., 0.)), QuatMatrix4::identity());
        assert_eq!(right_embed(q(1., 2., 3., 4.)).mul_vec([5., 6., 7., 8.]), [-60., 12., 30., 24.]);
        assert_eq!(left_embed(q(5., 6., 7., 8.)).mul_vec([1., 2., 3., 4.]), [-60., 12., 30., 24.]);
    }

    #[test]
    fn rotation_operator_examples() {
        let m = rotation_operator(&RotorWeight::new(0.0, [0.3, 0.1, -2.0])).unwrap();
        assert_eq!(m, QuatMatrix4::identity());
        let m = rotation_operator(&RotorWeight::new(FRAC_PI_4, [0.0, 0.0, 1.0])).unwrap();
        let v = m.mul_vec([0., 1., 0., 0.]);
        assert!(v[0].abs() < 1e-15 && v[1].abs() < 1e-15 && (v[2] - 1.0).abs() < 1e-15 && v[3].abs() < 1e-15);
        let (defect, det) = orthogonality_defect(&m.rotation_block());
        assert!(defect < 1e-15 && (det - 1.0).abs() < 1e-15);
    }

    #[test]
    fn f32_kernels_agree_with_f64() {
        let w64 = RotorWeight::new(0.7f64, [0.2, -0.5, 0.9]);
        let w32 = RotorWeight::new(0.7f32, [0.2, -0.5, 0.9]);
        let r64 = rotate(w64.normalize().unwrap(), PureQuaternion::new(1.0, 2.0, 3.0)).unwrap();
        let r32 = rotate(w32.normalize().unwrap(), PureQuaternion::new(1.0f32, 2.0, 3.0)).unwrap();
        for (a, b) in r64.to_array().iter().zip(r32.to_array()) {
            assert!((a - b as f64).abs() < 1e-10 * f32::TOL_SCALE * 10.0);
        }
    }
}
