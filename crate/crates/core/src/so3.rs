//! Rotations in 3D (the special orthogonal group SO(3)).
//!
//! [`Rotation`] stores a unit quaternion and converts to a matrix on demand.
//! Tangent vectors are plain axis-angle 3-vectors (radians).
//!
//! Conventions used by every factor in this crate:
//!
//! * `exp_map` / `log_map` are the usual Rodrigues maps.
//! * [`between`]`(a, b) = Log(a⁻¹·b)`, i.e. the increment expressed in the
//!   local (right) tangent space of `a`. The difference `a ⊖ b` is therefore
//!   `between(b, a) = Log(b⁻¹·a)`.
//! * Perturbations of optimisation variables are applied on the right:
//!   `R ← R·Exp(δ)`.
//!
//! Near angle π the logarithm is taken from the quaternion with `w ≥ 0` via
//! `atan2`, which stays well conditioned. At exactly π the sign of the
//! returned axis is fixed so that its largest-magnitude component is
//! positive.

use std::fmt;
use std::ops::Mul;
use std::sync::OnceLock;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

/// Below this angle (radians) the series expansions are used.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Axis-angle tangent vector (radians).
pub type TangentVector = Vector3<f64>;

/// An element of SO(3).
#[derive(Clone, Copy, PartialEq)]
pub struct Rotation {
    q: UnitQuaternion<f64>,
}

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [x, y, z, w] = self.to_xyzw();
        write!(f, "Rotation(qx={x:.9}, qy={y:.9}, qz={z:.9}, qw={w:.9})")
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            q: UnitQuaternion::identity(),
        }
    }

    /// Wraps a quaternion, normalising it.
    pub fn from_quaternion(q: Quaternion<f64>) -> Self {
        Self {
            q: UnitQuaternion::new_normalize(q),
        }
    }

    /// Builds a rotation from a Hamilton quaternion in `(x, y, z, w)` order.
    pub fn from_xyzw(x: f64, y: f64, z: f64, w: f64) -> Self {
        Self::from_quaternion(Quaternion::new(w, x, y, z))
    }

    /// Hamilton quaternion in `(x, y, z, w)` order with `w ≥ 0`.
    pub fn to_xyzw(&self) -> [f64; 4] {
        let q = self.q.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.i, s * q.j, s * q.k, s * q.w]
    }

    /// Projects an (approximately) orthonormal matrix onto SO(3).
    ///
    /// The quaternion is extracted from the largest diagonal element, so the
    /// conversion is stable for angles close to π.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*m);
        Self {
            q: UnitQuaternion::from_rotation_matrix(&rot),
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.q.to_rotation_matrix().into_inner()
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.q
    }

    pub fn inverse(&self) -> Self {
        Self {
            q: self.q.inverse(),
        }
    }

    /// `self · other`, renormalised.
    pub fn compose(&self, other: &Rotation) -> Self {
        Self::from_quaternion((self.q * other.q).into_inner())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.q.transform_vector(v)
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        log_map(self).norm()
    }

    /// Column `j` of the rotation matrix.
    pub fn column(&self, j: usize) -> Vector3<f64> {
        self.rotate(&Vector3::ith(j, 1.0))
    }

    /// `self · Exp(delta)`.
    pub fn retract(&self, delta: &TangentVector) -> Self {
        self.compose(&exp_map(delta))
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

impl Mul<&Rotation> for &Rotation {
    type Output = Rotation;

    fn mul(self, rhs: &Rotation) -> Rotation {
        self.compose(rhs)
    }
}

/// Skew-symmetric matrix with `hat(a) · b = a × b`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues rotation by `|ω|` about `ω / |ω|`.
pub fn exp_map(omega: &TangentVector) -> Rotation {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let (w, k) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 8.0, 0.5 - theta2 / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    Rotation::from_quaternion(Quaternion::new(w, k * omega.x, k * omega.y, k * omega.z))
}

/// Minimal axis-angle vector of `r` (norm in `[0, π]`).
pub fn log_map(r: &Rotation) -> TangentVector {
    let q = r.q.quaternion();
    let (mut w, mut v) = (q.w, q.imag());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let vn = v.norm();
    if vn < SMALL_ANGLE {
        // atan2(vn, w) / vn ≈ (1 - vn²/(3w²)) / w
        return v * (2.0 / w) * (1.0 - vn * vn / (3.0 * w * w));
    }
    if w == 0.0 {
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v = -v;
        }
    }
    v * (2.0 * vn.atan2(w) / vn)
}

/// `Log(a⁻¹ · b)`; `a ⊖ b` is `between(b, a)`.
pub fn between(a: &Rotation, b: &Rotation) -> TangentVector {
    log_map(&a.inverse().compose(b))
}

/// Geodesic angle between two rotations, from the trace formula.
pub fn geodesic_distance(a: &Rotation, b: &Rotation) -> f64 {
    let rel = a.matrix().transpose() * b.matrix();
    ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Inverse right Jacobian `J_r⁻¹(ω)`, so that
/// `Log(Exp(ω)·Exp(δ)) ≈ ω + J_r⁻¹(ω)·δ`.
pub fn right_jacobian_inv(omega: &TangentVector) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(omega);
    let coeff = if theta < SMALL_ANGLE {
        1.0 / 12.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + 0.5 * w + coeff * w * w
}

/// Right Jacobian `J_r(ω)`, the inverse of [`right_jacobian_inv`].
pub fn right_jacobian(omega: &TangentVector) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(omega);
    let (a, b) = if theta < SMALL_ANGLE {
        (0.5, 1.0 / 6.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() - a * w + b * w * w
}

/// The 24 proper rotations of the cube: signed permutation matrices with
/// determinant +1. The identity is always the first element.
pub fn cube_group() -> &'static [Rotation] {
    static GROUP: OnceLock<Vec<Rotation>> = OnceLock::new();
    GROUP.get_or_init(|| {
        const PERMS: [[usize; 3]; 6] = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        let mut out = Vec::with_capacity(24);
        for perm in PERMS {
            for signs in 0..8u8 {
                let mut m = Matrix3::zeros();
                for (row, &col) in perm.iter().enumerate() {
                    m[(row, col)] = if signs & (1 << row) != 0 { -1.0 } else { 1.0 };
                }
                if m.determinant() > 0.0 {
                    out.push(Rotation::from_matrix(&m));
                }
            }
        }
        out
    })
}

/// Member of the cube group closest (geodesically) to `r`.
pub fn nearest_cube_symmetry(r: &Rotation) -> (Rotation, f64) {
    cube_group()
        .iter()
        .map(|s| (*s, geodesic_distance(r, s)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("cube group is non-empty")
}

/// Smallest geodesic distance between `a` and `b·S` over the cube group.
pub fn distance_modulo_cube(a: &Rotation, b: &Rotation) -> f64 {
    cube_group()
        .iter()
        .map(|s| geodesic_distance(a, &b.compose(s)))
        .fold(f64::INFINITY, f64::min)
}
