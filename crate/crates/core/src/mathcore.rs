//! Small numeric primitives shared by every other module: rotations in
//! axis-angle and quaternion form, a stable softmax, the sinusoidal
//! positional encoding, and order-independent summation.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Unit quaternion `w + xi + yj + zk`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl Quaternion {
    pub const fn identity() -> Self {
        Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    /// Builds a quaternion from raw components and normalizes it. A zero (or
    /// non-finite) input yields the identity.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Self::identity();
        }
        Self { w: w / n, x: x / n, y: y / n, z: z / n }
    }

    pub fn from_array(q: [f64; 4]) -> Self {
        Self::new(q[0], q[1], q[2], q[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn from_axis_angle(v: &AxisAngle) -> Self {
        let angle = v.angle();
        if angle < 1e-300 {
            return Self::identity();
        }
        let axis = v.v / angle;
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, axis.x * s, axis.y * s, axis.z * s)
    }

    /// Hamilton product `self ⊗ rhs` (apply `rhs` first, then `self`).
    pub fn mul(&self, rhs: &Quaternion) -> Quaternion {
        let (a, b) = (self, rhs);
        Quaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn to_rotation_matrix(&self) -> Mat3 {
        let Quaternion { w, x, y, z } = *self;
        Mat3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Shepperd's method; the input must be a proper rotation.
    pub fn from_rotation_matrix(m: &Mat3) -> Quaternion {
        let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        }
    }
}

/// Partial derivatives of the rotation matrix of a *unit* quaternion with
/// respect to its four components `(w, x, y, z)`, treating them as
/// independent.
pub fn rotation_matrix_partials(q: &Quaternion) -> [Mat3; 4] {
    let Quaternion { w, x, y, z } = *q;
    let dw = Mat3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Mat3::new(
        0.0,
        2.0 * y,
        2.0 * z,
        2.0 * y,
        -4.0 * x,
        -2.0 * w,
        2.0 * z,
        2.0 * w,
        -4.0 * x,
    );
    let dy = Mat3::new(
        -4.0 * y,
        2.0 * x,
        2.0 * w,
        2.0 * x,
        0.0,
        2.0 * z,
        -2.0 * w,
        2.0 * z,
        -4.0 * y,
    );
    let dz = Mat3::new(
        -4.0 * z,
        -2.0 * w,
        2.0 * x,
        2.0 * w,
        -4.0 * z,
        2.0 * y,
        2.0 * x,
        2.0 * y,
        0.0,
    );
    [dw, dx, dy, dz]
}

/// Rotation vector: direction is the axis, length is the angle in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisAngle {
    pub v: Vec3,
}

impl AxisAngle {
    /// Wraps the angle into `[0, π]`, flipping the axis when needed.
    pub fn new(v: Vec3) -> Self {
        let angle = v.norm();
        if angle <= PI || !angle.is_finite() {
            return Self { v };
        }
        let axis = v / angle;
        let wrapped = angle.rem_euclid(2.0 * PI);
        if wrapped <= PI {
            Self { v: axis * wrapped }
        } else {
            Self { v: -axis * (2.0 * PI - wrapped) }
        }
    }

    pub fn zero() -> Self {
        Self { v: Vec3::zeros() }
    }

    pub fn angle(&self) -> f64 {
        self.v.norm()
    }
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula. The zero vector maps to the identity.
pub fn axis_angle_to_rotation(v: &AxisAngle) -> Mat3 {
    rodrigues(&v.v)
}

pub(crate) fn rodrigues(v: &Vec3) -> Mat3 {
    let theta2 = v.norm_squared();
    let k = skew(v);
    let (a, b) = if theta2 < 1e-12 {
        // Taylor expansions of sin(t)/t and (1 - cos t)/t².
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Mat3::identity() + k * a + k * k * b
}

/// Derivatives `∂R/∂v_i` of Rodrigues' map at `v`.
///
/// Uses `∂R/∂v_i = (v_i [v]× + [v × (I − R) e_i]×) R / ‖v‖²`, with the limit
/// `[e_i]×` at the origin.
pub fn rodrigues_partials(v: &Vec3) -> [Mat3; 3] {
    let theta2 = v.norm_squared();
    if theta2 < 1e-16 {
        return [skew(&Vec3::x()), skew(&Vec3::y()), skew(&Vec3::z())];
    }
    let r = rodrigues(v);
    let vx = skew(v);
    let i_minus_r = Mat3::identity() - r;
    let mut out = [Mat3::zeros(); 3];
    for (i, slot) in out.iter_mut().enumerate() {
        let e = i_minus_r.column(i).into_owned();
        let m = vx * v[i] + skew(&v.cross(&e));
        *slot = m * r / theta2;
    }
    out
}

/// True when `m` is orthonormal with determinant +1 within `tol`.
pub fn is_rotation(m: &Mat3, tol: f64) -> bool {
    let e = m.transpose() * m - Mat3::identity();
    e.abs().max() <= tol && (m.determinant() - 1.0).abs() <= tol
}

/// Softmax with max-subtraction.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmax whose reductions are invariant to the order of `x`.
pub fn softmax_order_independent(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s = sorted_sum(e.iter().copied());
    e.into_iter().map(|v| v / s).collect()
}

/// Vector-Jacobian product of softmax: given `y = softmax(x)` and `dy`,
/// returns `dx = y ⊙ (dy − ⟨y, dy⟩)`.
pub fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter().zip(dy).map(|(yi, di)| yi * (di - dot)).collect()
}

/// Sums values after sorting them, so any permutation of the same multiset
/// produces a bit-identical result.
pub fn sorted_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v.into_iter().sum()
}

pub fn positional_encoding_dim(frequencies: usize) -> usize {
    3 + 6 * frequencies
}

/// `[p, sin(2⁰πp), cos(2⁰πp), …, sin(2^{L−1}πp), cos(2^{L−1}πp)]`, each
/// trigonometric block holding the three coordinates in order.
pub fn positional_encoding(p: &Vec3, frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(positional_encoding_dim(frequencies));
    out.extend_from_slice(&[p.x, p.y, p.z]);
    for k in 0..frequencies {
        let f = (1u64 << k) as f64 * PI;
        out.extend(p.iter().map(|c| (f * c).sin()));
        out.extend(p.iter().map(|c| (f * c).cos()));
    }
    out
}

/// Transposed Jacobian of [`positional_encoding`] applied to `d`.
pub fn positional_encoding_vjp(p: &Vec3, frequencies: usize, d: &[f64]) -> Vec3 {
    let mut g = Vec3::new(d[0], d[1], d[2]);
    for k in 0..frequencies {
        let f = (1u64 << k) as f64 * PI;
        let base = 3 + 6 * k;
        for a in 0..3 {
            let (s, c) = (f * p[a]).sin_cos();
            g[a] += f * c * d[base + a] - f * s * d[base + 3 + a];
        }
    }
    g
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}
