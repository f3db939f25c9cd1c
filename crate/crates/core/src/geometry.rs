//! SE(3) poses, pinhole projection and pose perturbation.
//!
//! Poses map world coordinates into the camera frame (`p_cam = R p_world + t`).
//! Local updates are applied on the left, `T <- exp(xi) * T`, so a twist is
//! expressed in the camera frame. Twists are ordered `(rotation, translation)`.

use nalgebra::{Matrix2x6, Matrix3, Matrix3x4, Rotation3, UnitQuaternion, Vector3, Vector6};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type Vec3 = Vector3<f64>;

/// Six-vector `(omega, upsilon)` in the tangent space of SE(3).
pub type Twist = Vector6<f64>;

/// Below this rotation angle (radians) exp/log use series expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn dist(&self, other: &PixelCoord) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 500.0,
            fy: 500.0,
            cx: 480.0,
            cy: 160.0,
            width: 960,
            height: 320,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::config("camera", "fx and fy must be positive and finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("camera", "width and height must be positive"));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(Error::config("camera.cx", "principal point outside image"));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::config("camera.cy", "principal point outside image"));
        }
        Ok(())
    }

    /// Nearest integer pixel for a sub-pixel coordinate, if inside the image.
    pub fn pixel_of(&self, px: &PixelCoord) -> Option<(usize, usize)> {
        let u = px.u.round();
        let v = px.v.round();
        if u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64 {
            Some((u as usize, v as usize))
        } else {
            None
        }
    }

    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        Vec3::new((u - self.cx) * depth / self.fx, (v - self.cy) * depth / self.fy, depth)
    }
}

/// Rigid transform from world to camera coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    /// Builds a pose from a rotation matrix that may be slightly
    /// non-orthogonal (e.g. parsed from text).
    pub fn from_rotation_matrix(r: &Matrix3<f64>, t: Vec3) -> Self {
        let rot = Rotation3::from_matrix_eps(r, 1e-15, 100, Rotation3::identity());
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), t)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        let q = self.rotation.into_inner() * other.rotation.into_inner();
        PoseSE3 {
            rotation: UnitQuaternion::new_normalize(q),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let inv = self.rotation.inverse();
        PoseSE3 {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.inverse() * self.translation)
    }

    pub fn to_matrix3x4(&self) -> Matrix3x4<f64> {
        let r = self.rotation_matrix();
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.set_column(3, &self.translation);
        m
    }

    pub fn from_matrix3x4(m: &Matrix3x4<f64>) -> Self {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        Self::from_rotation_matrix(&r, m.column(3).into_owned())
    }

    /// Left update `exp(xi) * self`.
    pub fn retract(&self, xi: &Twist) -> PoseSE3 {
        se3_exp(xi).compose(self)
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Mul for PoseSE3 {
    type Output = PoseSE3;

    fn mul(self, rhs: PoseSE3) -> PoseSE3 {
        self.compose(&rhs)
    }
}

pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation angle in radians, accurate near zero.
pub fn rotation_angle(q: &UnitQuaternion<f64>) -> f64 {
    2.0 * q.imag().norm().atan2(q.scalar().abs())
}

pub fn pose_compose(a: &PoseSE3, b: &PoseSE3) -> PoseSE3 {
    a.compose(b)
}

pub fn pose_inverse(a: &PoseSE3) -> PoseSE3 {
    a.inverse()
}

pub fn transform_point(t: &PoseSE3, p_world: &Vec3) -> Vec3 {
    t.transform_point(p_world)
}

/// Pinhole projection of a camera-frame point. No bounds clamping.
pub fn project_point(k: &CameraIntrinsics, p_cam: &Vec3) -> Result<PixelCoord> {
    if !(p_cam.z > 0.0) {
        return Err(Error::BehindCamera { z: p_cam.z });
    }
    Ok(PixelCoord {
        u: k.fx * p_cam.x / p_cam.z + k.cx,
        v: k.fy * p_cam.y / p_cam.z + k.cy,
    })
}

/// World point to pixel through pose `t`.
pub fn h_project(k: &CameraIntrinsics, t: &PoseSE3, p_world: &Vec3) -> Result<PixelCoord> {
    project_point(k, &t.transform_point(p_world))
}

/// d(pixel)/d(xi) for the left update `exp(xi) * T`, evaluated at the
/// camera-frame point `p_cam`.
pub fn projection_jacobian(k: &CameraIntrinsics, p_cam: &Vec3) -> Matrix2x6<f64> {
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    // d(pi)/d(p) * [ -[p]x | I ]
    let a = k.fx * iz;
    let b = -k.fx * x * iz2;
    let c = k.fy * iz;
    let d = -k.fy * y * iz2;
    Matrix2x6::new(
        b * y,
        a * z - b * x,
        -a * y,
        a,
        0.0,
        b,
        -c * z + d * y,
        -d * x,
        c * x,
        0.0,
        c,
        d,
    )
}

pub fn se3_exp(xi: &Twist) -> PoseSE3 {
    let omega = Vec3::new(xi[0], xi[1], xi[2]);
    let upsilon = Vec3::new(xi[3], xi[4], xi[5]);
    let theta = omega.norm();
    let w = skew(&omega);
    let w2 = w * w;
    let v = if theta < SMALL_ANGLE {
        Matrix3::identity() + 0.5 * w + w2 / 6.0
    } else {
        let t2 = theta * theta;
        Matrix3::identity() + (1.0 - theta.cos()) / t2 * w + (theta - theta.sin()) / (t2 * theta) * w2
    };
    let rotation = if theta < SMALL_ANGLE {
        UnitQuaternion::new_normalize(nalgebra::Quaternion::new(
            1.0,
            0.5 * omega.x,
            0.5 * omega.y,
            0.5 * omega.z,
        ))
    } else {
        UnitQuaternion::from_scaled_axis(omega)
    };
    PoseSE3 {
        rotation,
        translation: v * upsilon,
    }
}

/// Inverse of [`se3_exp`] for rotation angles below pi.
pub fn se3_log(t: &PoseSE3) -> Twist {
    let q = if t.rotation.scalar() < 0.0 {
        UnitQuaternion::new_unchecked(-t.rotation.into_inner())
    } else {
        t.rotation
    };
    let theta = rotation_angle(&q);
    let omega = if theta < SMALL_ANGLE {
        2.0 * q.imag()
    } else {
        q.imag() * (theta / q.imag().norm())
    };
    let w = skew(&omega);
    let w2 = w * w;
    let v_inv = if theta < SMALL_ANGLE {
        Matrix3::identity() - 0.5 * w + w2 / 12.0
    } else {
        let half = 0.5 * theta;
        let coef = (1.0 - half * half.cos() / half.sin()) / (theta * theta);
        Matrix3::identity() - 0.5 * w + coef * w2
    };
    let upsilon = v_inv * t.translation;
    Twist::new(omega.x, omega.y, omega.z, upsilon.x, upsilon.y, upsilon.z)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseError {
    pub rot_deg: f64,
    pub transl_m: f64,
}

/// Geodesic rotation angle and camera-center distance between two poses.
pub fn pose_error(a: &PoseSE3, b: &PoseSE3) -> PoseError {
    let rot_deg = if a.rotation == b.rotation {
        0.0
    } else {
        rotation_angle(&(a.rotation * b.rotation.inverse())).to_degrees()
    };
    PoseError {
        rot_deg,
        transl_m: (a.center() - b.center()).norm(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbBounds {
    /// Per-axis bound on the camera-center offset, meters.
    pub max_transl: f64,
    /// Per-axis bound on the rotation-vector components, degrees.
    pub max_rot_deg: f64,
}

impl Default for PerturbBounds {
    fn default() -> Self {
        Self {
            max_transl: 2.0,
            max_rot_deg: 10.0,
        }
    }
}

impl PerturbBounds {
    pub fn new(max_transl: f64, max_rot_deg: f64) -> Self {
        Self {
            max_transl,
            max_rot_deg,
        }
    }
}

/// Shifts the camera center by a uniform per-axis offset and rotates by a
/// rotation vector with uniform per-axis components.
pub fn perturb_pose(t: &PoseSE3, bounds: &PerturbBounds, seed: u64) -> PoseSE3 {
    let mut rng = rng::seeded(seed, 0x7065_7274);
    perturb_pose_with(t, bounds, &mut rng)
}

pub fn perturb_pose_with<R: Rng + ?Sized>(t: &PoseSE3, bounds: &PerturbBounds, rng: &mut R) -> PoseSE3 {
    if bounds.max_transl == 0.0 && bounds.max_rot_deg == 0.0 {
        return *t;
    }
    let mut uniform = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let dc = Vec3::new(
        uniform(bounds.max_transl),
        uniform(bounds.max_transl),
        uniform(bounds.max_transl),
    );
    let r = bounds.max_rot_deg.to_radians();
    let rv = Vec3::new(uniform(r), uniform(r), uniform(r));
    let rotation = UnitQuaternion::from_scaled_axis(rv) * t.rotation;
    let center = t.center() + dc;
    PoseSE3 {
        rotation,
        translation: -(rotation * center),
    }
}
