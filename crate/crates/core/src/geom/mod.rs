//! Rigid-body math: rotations, poses, zxy-Euler parameterization,
//! body-frame rotation noise and triangle-mesh ray casting.

mod bvh;
mod mesh;

pub use bvh::{Aabb, MeshBvh, TriangleRef};
pub use mesh::{ray_cast, ray_triangle, RayHit, TriMesh};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use std::ops::Mul;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Half-width of the band around |beta| = pi/2 where decomposition is refused.
pub const GIMBAL_BAND: f64 = 1e-3;

const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("gimbal lock: |beta| = {beta:.6} is within {GIMBAL_BAND} rad of pi/2")]
    GimbalLock { beta: f64 },
    #[error("matrix is not a rotation (orthonormality error {ortho:.3e}, det {det:.6})")]
    NotARotation { ortho: f64, det: f64 },
    #[error("mesh invariant violated: {0}")]
    InvalidMesh(String),
}

/// A proper rotation stored as a 3x3 orthonormal matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3(Matrix3<f64>);

impl Default for Rotation3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation3 {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Accepts `m` if it is a rotation within tolerance. Small drift is removed
    /// by projecting onto SO(3).
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeomError> {
        let ortho = (m.transpose() * m - Matrix3::identity()).norm();
        let det = m.determinant();
        if ortho > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(GeomError::NotARotation { ortho, det });
        }
        let r = Self(m);
        Ok(if ortho > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            r.orthonormalized()
        } else {
            r
        })
    }

    /// Wraps a matrix the caller guarantees to be a rotation.
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Rotation whose z column is `forward`, with x as close to `x_hint` as
    /// the constraint allows. Falls back to any perpendicular x when the hint
    /// is parallel to `forward`.
    pub fn look_along(forward: &Vec3, x_hint: &Vec3) -> Option<Self> {
        let z = forward.try_normalize(1e-12)?;
        let x = (x_hint - z * x_hint.dot(&z))
            .try_normalize(1e-9)
            .or_else(|| z.cross(&Vec3::x()).try_normalize(1e-9))
            .or_else(|| z.cross(&Vec3::y()).try_normalize(1e-9))?;
        let y = z.cross(&x);
        Some(Self::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z])))
    }

    /// Nearest rotation in the Frobenius sense (polar decomposition).
    pub fn orthonormalized(&self) -> Self {
        let svd = self.0.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Self(r)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn column(&self, i: usize) -> Vec3 {
        self.0.column(i).into_owned()
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn rot_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn rot_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Roll-pitch-yaw about fixed axes: `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self::rot_z(yaw) * Self::rot_y(pitch) * Self::rot_x(roll)
    }

    /// Exponential map of an axis-angle vector (Rodrigues).
    pub fn exp(omega: &Vec3) -> Self {
        let theta = omega.norm();
        if theta == 0.0 {
            return Self::identity();
        }
        let k = omega / theta;
        let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        let (s, c) = theta.sin_cos();
        Self(Matrix3::identity() + kx * s + kx * kx * (1.0 - c))
    }

    /// Axis-angle vector of this rotation, angle in [0, pi].
    pub fn log(&self) -> Vec3 {
        let m = &self.0;
        let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let theta = cos.acos();
        if theta < 1e-12 {
            return Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5;
        }
        if PI - theta < 1e-6 {
            // Axis from the symmetric part; sign is irrelevant at theta = pi.
            let b = (m + Matrix3::identity()) * 0.5;
            let i = (0..3).max_by(|&a, &b2| b[(a, a)].total_cmp(&b[(b2, b2)])).unwrap();
            let mut axis = b.column(i).into_owned();
            axis /= axis.norm();
            return axis * theta;
        }
        let w = Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
        w * (theta / (2.0 * theta.sin()))
    }

    /// Geodesic distance (rotation angle of `self^T * other`).
    pub fn angle_to(&self, other: &Rotation3) -> f64 {
        let rel = self.0.transpose() * other.0;
        ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }

    /// Frobenius norms of `R^T R - I` and `det(R) - 1`.
    pub fn orthonormality_error(&self) -> (f64, f64) {
        (
            (self.0.transpose() * self.0 - Matrix3::identity()).norm(),
            self.0.determinant() - 1.0,
        )
    }

    /// Rotation `t` of the way along the geodesic to `goal`, with the step
    /// angle capped at `max_step`.
    pub fn step_toward(&self, goal: &Rotation3, max_step: f64) -> Rotation3 {
        let omega = (self.inverse() * *goal).log();
        let angle = omega.norm();
        if angle <= max_step {
            return *goal;
        }
        *self * Rotation3::exp(&(omega * (max_step / angle)))
    }
}

impl Mul for Rotation3 {
    type Output = Rotation3;
    fn mul(self, rhs: Rotation3) -> Rotation3 {
        Rotation3(self.0 * rhs.0)
    }
}

/// Rigid transform: `x -> rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose3 {
    pub rotation: Rotation3,
    pub translation: Vec3,
}

impl Pose3 {
    pub fn new(rotation: Rotation3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Rotation3::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Rotation3::identity(), t)
    }

    pub fn from_xyz_rpy(xyz: [f64; 3], rpy: [f64; 3]) -> Self {
        Self::new(Rotation3::from_rpy(rpy[0], rpy[1], rpy[2]), Vec3::from(xyz))
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self::new(r_inv, -(r_inv.rotate(&self.translation)))
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation.rotate(v)
    }

    pub fn compose(&self, other: &Pose3) -> Pose3 {
        Pose3::new(self.rotation * other.rotation, self.transform_point(&other.translation))
    }
}

impl Mul for Pose3 {
    type Output = Pose3;
    fn mul(self, rhs: Pose3) -> Pose3 {
        self.compose(&rhs)
    }
}

/// zxy-Euler angles: `R = Rz(alpha) * Rx(beta) * Ry(gamma)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerZXY {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl EulerZXY {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self { alpha, beta, gamma }
    }

    /// True when every angle lies in its declared range.
    pub fn in_domain(&self) -> bool {
        (-PI..PI).contains(&self.alpha)
            && self.beta.abs() < FRAC_PI_2
            && (-PI..PI).contains(&self.gamma)
    }
}

/// Wraps an angle into [-pi, pi).
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

pub fn euler_zxy_compose(e: &EulerZXY) -> Rotation3 {
    Rotation3::rot_z(e.alpha) * Rotation3::rot_x(e.beta) * Rotation3::rot_y(e.gamma)
}

pub fn euler_zxy_decompose(r: &Rotation3) -> Result<EulerZXY, GeomError> {
    let m = r.matrix();
    let beta = m[(2, 1)].clamp(-1.0, 1.0).asin();
    if FRAC_PI_2 - beta.abs() < GIMBAL_BAND {
        return Err(GeomError::GimbalLock { beta });
    }
    let alpha = wrap_angle((-m[(0, 1)]).atan2(m[(1, 1)]));
    let gamma = wrap_angle((-m[(2, 0)]).atan2(m[(2, 2)]));
    Ok(EulerZXY { alpha, beta, gamma })
}

/// `r * exp(omega)` with omega ~ N(0, sigma^2 I); noise applied in the body frame.
pub fn perturb_rotation<R: Rng + ?Sized>(r: &Rotation3, sigma_rad: f64, rng: &mut R) -> Rotation3 {
    let omega = Vec3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    ) * sigma_rad;
    if sigma_rad == 0.0 {
        return *r;
    }
    *r * Rotation3::exp(&omega)
}
