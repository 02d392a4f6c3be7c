//! Rigid transforms, the pinhole camera, point clouds and end-effector twists.
//!
//! Conventions: world frame is the robot base at table height with z up.
//! A camera looks along +z of its own frame, x to the right of the image and
//! y down. Pixel coordinates are continuous, with integer pixel centres at
//! integer coordinates.

use nalgebra::{Matrix3, Matrix4, Point3, Rotation3, Unit, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("frame mismatch: cloud is in `{cloud}` but transform expects `{expected}`")]
    FrameMismatch { cloud: String, expected: String },
    #[error("invalid camera model: {0}")]
    InvalidCamera(String),
    #[error("non-finite coordinate in point cloud")]
    NonFinite,
}

/// Rigid transform in SE(3). Rotation is a unit quaternion, translation in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::new(x, y, z))
    }

    /// Position plus a rotation about the vertical axis.
    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            Vector3::new(x, y, z),
        )
    }

    pub fn from_axis_angle(axis: &Unit<Vector3<f64>>, angle: f64, translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::from_axis_angle(axis, angle), translation)
    }

    pub fn from_rotation_matrix(r: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*r);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    /// `self ∘ other`: expresses frame `other` in the parent frame of `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let q = self.rotation.quaternion() * other.rotation.quaternion();
        Pose {
            rotation: UnitQuaternion::new_normalize(q),
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Pose {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        Pose::from_rotation_matrix(&r, t)
    }

    /// Heading angle of the rotated x axis projected onto the horizontal plane.
    pub fn yaw(&self) -> f64 {
        let x = self.rotation * Vector3::x();
        x.y.atan2(x.x)
    }

    /// Rotation angle (radians, in [0, π]) between this pose and `other`.
    pub fn angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    pub fn is_valid(&self) -> bool {
        let q = self.rotation.quaternion();
        (q.norm() - 1.0).abs() <= 1e-9 && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Wraps an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Coordinate frame label carried by point clouds.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Frame(pub String);

impl Frame {
    pub fn new(name: impl Into<String>) -> Self {
        Frame(name.into())
    }
    pub fn world() -> Self {
        Frame::new("world")
    }
    pub fn camera() -> Self {
        Frame::new("camera")
    }
    pub fn object() -> Self {
        Frame::new("object")
    }
    pub fn end_effector() -> Self {
        Frame::new("end_effector")
    }
}

impl std::fmt::Display for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// A pose tagged with the frames it maps between (`source` points into `target`).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTransform {
    pub pose: Pose,
    pub source: Frame,
    pub target: Frame,
}

impl FrameTransform {
    pub fn new(pose: Pose, source: Frame, target: Frame) -> Self {
        Self {
            pose,
            source,
            target,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, frame: Frame) -> Result<Self, GeometryError> {
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self { points, frame })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        if self.points.is_empty() {
            return Vector3::zeros();
        }
        self.points.iter().sum::<Vector3<f64>>() / self.points.len() as f64
    }

    /// Keeps every k-th point so that at most `max_points` remain.
    pub fn subsample(&self, max_points: usize) -> PointCloud {
        if self.points.len() <= max_points || max_points == 0 {
            return self.clone();
        }
        let step = self.points.len().div_ceil(max_points);
        PointCloud {
            points: self.points.iter().step_by(step).copied().collect(),
            frame: self.frame.clone(),
        }
    }
}

/// Rotates then translates every point; the result is relabelled with the target frame.
pub fn transform_points(tf: &FrameTransform, cloud: &PointCloud) -> Result<PointCloud, GeometryError> {
    if cloud.frame != tf.source {
        return Err(GeometryError::FrameMismatch {
            cloud: cloud.frame.0.clone(),
            expected: tf.source.0.clone(),
        });
    }
    Ok(PointCloud {
        points: cloud
            .points
            .iter()
            .map(|p| tf.pose.transform_point(p))
            .collect(),
        frame: tf.target.clone(),
    })
}

/// Pinhole intrinsics plus the camera mount (camera pose in the end-effector frame).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub extrinsic: Pose,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        extrinsic: Pose,
    ) -> Result<Self, GeometryError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            extrinsic,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidCamera("zero image size".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        if !self.extrinsic.is_valid() {
            return Err(GeometryError::InvalidCamera("invalid extrinsic".into()));
        }
        Ok(())
    }

    /// 848×480 sensor with a 69° horizontal field of view, principal point at the centre.
    pub fn default_sensor(extrinsic: Pose) -> Self {
        let width = 848usize;
        let height = 480usize;
        let hfov = 69.0f64.to_radians();
        let f = (width as f64 / 2.0) / (hfov / 2.0).tan();
        Self {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            extrinsic,
        }
    }

    /// Same optics sampled on a coarser (or finer) pixel grid.
    pub fn scaled(&self, scale: f64) -> Self {
        let width = ((self.width as f64) * scale).round().max(1.0) as usize;
        let height = ((self.height as f64) * scale).round().max(1.0) as usize;
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: sx * (self.cx + 0.5) - 0.5,
            cy: sy * (self.cy + 0.5) - 0.5,
            width,
            height,
            extrinsic: self.extrinsic,
        }
    }

    pub fn intrinsic_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Camera-frame point to (u, v, depth).
    pub fn project(&self, p: &Vector3<f64>) -> Result<(f64, f64, f64), GeometryError> {
        if p.z <= 0.0 {
            return Err(GeometryError::BehindCamera(p.z));
        }
        Ok((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
            p.z,
        ))
    }

    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>, GeometryError> {
        if depth <= 0.0 || !depth.is_finite() {
            return Err(GeometryError::NonPositiveDepth(depth));
        }
        Ok(Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        ))
    }

    /// Camera pose in the world given the end-effector pose.
    pub fn world_pose(&self, ee_pose: &Pose) -> Pose {
        ee_pose.compose(&self.extrinsic)
    }

    /// Projects a world point seen from a camera mounted on `ee_pose`.
    pub fn project_world(&self, ee_pose: &Pose, p_world: &Vector3<f64>) -> Result<(f64, f64, f64), GeometryError> {
        let p_cam = self.world_pose(ee_pose).inverse().transform_point(p_world);
        self.project(&p_cam)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && v >= -0.5 && u < self.width as f64 - 0.5 && v < self.height as f64 - 0.5
    }
}

/// Builds a camera orientation whose optical axis points along `forward` and whose
/// image x axis is as close as possible to `right` (both in the parent frame).
pub fn look_rotation(forward: &Vector3<f64>, right: &Vector3<f64>) -> UnitQuaternion<f64> {
    let z = forward.normalize();
    let x = (right - z * z.dot(right)).normalize();
    let y = z.cross(&x);
    let m = Matrix3::from_columns(&[x, y, z]);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
}

/// End-effector velocity command: linear velocity (m/s) and yaw rate about the
/// end-effector z axis (rad/s), all in the end-effector frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub alpha: f64,
}

/// Speed limits for a twist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedCap {
    pub linear: f64,
    pub angular: f64,
}

impl Twist {
    pub fn new(vx: f64, vy: f64, vz: f64, alpha: f64) -> Self {
        Self { vx, vy, vz, alpha }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn linear(&self) -> Vector3<f64> {
        Vector3::new(self.vx, self.vy, self.vz)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.vx, self.vy, self.vz, self.alpha]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Twist {
        Twist::new(self.vx * s, self.vy * s, self.vz * s, self.alpha * s)
    }

    /// Limits the linear speed (preserving direction) and the yaw rate.
    pub fn clipped(&self, cap: &SpeedCap) -> Twist {
        let lin = self.linear();
        let n = lin.norm();
        let lin = if n > cap.linear && n > 0.0 {
            lin * (cap.linear / n)
        } else {
            lin
        };
        Twist::new(
            lin.x,
            lin.y,
            lin.z,
            self.alpha.clamp(-cap.angular, cap.angular),
        )
    }

    pub fn within(&self, cap: &SpeedCap) -> bool {
        self.linear().norm() <= cap.linear * (1.0 + 1e-12) && self.alpha.abs() <= cap.angular * (1.0 + 1e-12)
    }

    /// Integrates this end-effector-frame twist for `dt` seconds.
    pub fn integrate(&self, pose: &Pose, dt: f64) -> Pose {
        let world_v = pose.rotation * self.linear();
        let dq = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.alpha * dt);
        Pose {
            rotation: UnitQuaternion::new_normalize(dq.quaternion() * pose.rotation.quaternion()),
            translation: pose.translation + world_v * dt,
        }
    }
}

pub fn homogeneous(p: &Vector3<f64>) -> Vector4<f64> {
    Vector4::new(p.x, p.y, p.z, 1.0)
}

pub fn to_point(p: &Vector3<f64>) -> Point3<f64> {
    Point3::from(*p)
}
