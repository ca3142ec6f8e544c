//! Rotation and rigid-transform algebra plus capsule distance fields.

use std::ops::Mul;

use nalgebra::{Matrix3, SVD};
use serde::{Deserialize, Serialize};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Unit quaternion stored as (w, x, y, z) with canonical sign `w >= 0`.
///
/// When `w == 0` the first non-zero vector component is made positive, so
/// `q` and `-q` always map to the same stored value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Quat::IDENTITY
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalize and canonicalize raw components. `None` if the input has
    /// (near) zero norm or is not finite.
    pub fn try_new(w: f64, x: f64, y: f64, z: f64) -> Option<Quat> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-12 {
            return None;
        }
        // already unit to rounding: keep the bits so stored quaternions round-trip
        if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Some(Quat::canonical(w, x, y, z));
        }
        Some(Quat::canonical(w / n, x / n, y / n, z / n))
    }

    /// Like [`Quat::try_new`] but falls back to identity for degenerate input.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Quat {
        Quat::try_new(w, x, y, z).unwrap_or(Quat::IDENTITY)
    }

    pub fn from_array(a: [f64; 4]) -> Option<Quat> {
        Quat::try_new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    fn canonical(w: f64, x: f64, y: f64, z: f64) -> Quat {
        let flip = if w != 0.0 {
            w < 0.0
        } else if x != 0.0 {
            x < 0.0
        } else if y != 0.0 {
            y < 0.0
        } else {
            z < 0.0
        };
        if flip {
            Quat {
                w: -w,
                x: -x,
                y: -y,
                z: -z,
            }
        } else {
            Quat { w, x, y, z }
        }
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Quat {
        let n = axis.norm();
        if n < 1e-15 || angle == 0.0 {
            return Quat::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Quat::new(c, a.x * s, a.y * s, a.z * s)
    }

    /// Exponential map from a rotation vector (axis × angle).
    pub fn from_rotation_vector(v: &Vec3) -> Quat {
        let angle = v.norm();
        if angle < 1e-12 {
            // second-order expansion keeps tiny increments accurate
            return Quat::new(1.0 - angle * angle / 8.0, 0.5 * v.x, 0.5 * v.y, 0.5 * v.z);
        }
        Quat::from_axis_angle(v, angle)
    }

    /// Logarithm map; the returned angle lies in `[0, π]`.
    pub fn to_rotation_vector(self) -> Vec3 {
        let v = Vec3::new(self.x, self.y, self.z);
        let s = v.norm();
        if s < 1e-12 {
            return 2.0 * v;
        }
        let angle = 2.0 * s.atan2(self.w);
        v * (angle / s)
    }

    pub fn conjugate(self) -> Quat {
        Quat::canonical(self.w, -self.x, -self.y, -self.z)
    }

    pub fn inverse(self) -> Quat {
        self.conjugate()
    }

    pub fn dot(self, o: Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// Rotation angle between two orientations, in radians.
    pub fn angle_to(self, o: Quat) -> f64 {
        2.0 * self.dot(o).abs().min(1.0).acos()
    }

    /// Hamilton product `self ∘ other` (apply `other` first).
    pub fn mul_quat(self, b: Quat) -> Quat {
        let a = self;
        Quat::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn rotate(self, v: &Vec3) -> Vec3 {
        // v' = v + 2w (u × v) + 2 u × (u × v)
        let u = Vec3::new(self.x, self.y, self.z);
        let uv = u.cross(v);
        v + 2.0 * self.w * uv + 2.0 * u.cross(&uv)
    }

    pub fn to_matrix(self) -> Matrix3<f64> {
        let Quat { w, x, y, z } = self;
        Matrix3::new(
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

    /// Rotation matrix to quaternion (Shepperd's method).
    pub fn from_matrix(m: &Matrix3<f64>) -> Quat {
        let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Quat::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quat::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        }
    }

    /// Minimal rotation taking direction `from` onto direction `to`.
    pub fn shortest_arc(from: &Vec3, to: &Vec3) -> Quat {
        let (nf, nt) = (from.norm(), to.norm());
        if nf < 1e-15 || nt < 1e-15 {
            return Quat::IDENTITY;
        }
        let a = from / nf;
        let b = to / nt;
        let d = a.dot(&b);
        if d < -1.0 + 1e-12 {
            // antiparallel: rotate π about any axis orthogonal to `a`
            let helper = if a.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            let axis = a.cross(&helper).normalize();
            return Quat::from_axis_angle(&axis, std::f64::consts::PI);
        }
        let c = a.cross(&b);
        Quat::new(1.0 + d, c.x, c.y, c.z)
    }

    pub fn is_unit(self, tol: f64) -> bool {
        (self.dot(self) - 1.0).abs() <= tol
    }
}

impl Mul for Quat {
    type Output = Quat;
    fn mul(self, rhs: Quat) -> Quat {
        self.mul_quat(rhs)
    }
}

impl Mul<Vec3> for Quat {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.rotate(&rhs)
    }
}

/// `p ↦ R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        RigidTransform::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: Quat::IDENTITY,
        translation: Vec3::new(0.0, 0.0, 0.0),
    };

    pub fn new(rotation: Quat, translation: Vec3) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    /// `self ∘ other`: apply `other`, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let r = self.rotation.inverse();
        RigidTransform {
            rotation: r,
            translation: -r.rotate(&self.translation),
        }
    }
}

/// Least-squares rigid alignment (Kabsch) mapping `src` onto `dst`.
///
/// Returns `None` when fewer than three points are given or the points are
/// collinear, in which case the rotation is not determined.
pub fn kabsch(src: &[Vec3], dst: &[Vec3]) -> Option<RigidTransform> {
    if src.len() != dst.len() || src.len() < 3 {
        return None;
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = SVD::new(h, true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut sv = svd.singular_values;
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if sv[1] <= 1e-12 * sv[0].max(1e-300) {
        return None;
    }
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let corr = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let r = v * corr * u.transpose();
    let q = Quat::from_matrix(&r);
    Some(RigidTransform::new(q, cd - q.rotate(&cs)))
}

/// Segment with radius; degenerates to a sphere when the endpoints coincide.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

impl Capsule {
    pub fn new(a: Vec3, b: Vec3, radius: f64) -> crate::Result<Capsule> {
        if !(radius > 0.0) {
            return Err(crate::Error::invalid(format!("capsule radius must be > 0, got {radius}")));
        }
        Ok(Capsule { a, b, radius })
    }

    /// Distance from `p` to the capsule axis segment.
    pub fn axis_distance(&self, p: &Vec3) -> f64 {
        let ab = self.b - self.a;
        let len2 = ab.norm_squared();
        if len2 < 1e-24 {
            return (p - self.a).norm();
        }
        let t = ((p - self.a).dot(&ab) / len2).clamp(0.0, 1.0);
        (p - (self.a + ab * t)).norm()
    }

    /// Negative inside, positive outside.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.axis_distance(p) - self.radius
    }
}

pub fn capsule_signed_distance(p: &Vec3, c: &Capsule) -> f64 {
    c.signed_distance(p)
}
