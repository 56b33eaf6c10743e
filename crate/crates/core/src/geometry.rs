//! Pose algebra, quaternion operations, and the pinhole camera model.
//!
//! Everything here is double precision. Orientations are unit
//! quaternions stored `(w, x, y, z)` and canonicalized to `w >= 0` so
//! every rotation has exactly one representation (no double cover
//! ambiguity in tests or serialized data).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used by validity checks on quaternion norms.
pub const UNIT_NORM_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Vec3

/// A 3-vector in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3 {
            x: self.y * o.z - self.z * o.y,
            y: self.z * o.x - self.x * o.z,
            z: self.x * o.y - self.y * o.x,
        }
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        self * (1.0 / n)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    /// Componentwise minimum.
    pub fn min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    /// Componentwise maximum.
    pub fn max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

// ---------------------------------------------------------------------------
// Quaternions

/// A unit quaternion `(w, x, y, z)` representing a rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let axis = axis.normalized();
        let (s, c) = (angle * 0.5).sin_cos();
        Quat::new(c, axis.x * s, axis.y * s, axis.z * s).canonicalized()
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(self, o: Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn normalized(self) -> Quat {
        let inv = 1.0 / self.norm();
        Quat::new(self.w * inv, self.x * inv, self.y * inv, self.z * inv)
    }

    /// Flip sign so `w >= 0`. 180-degree rotations (`w == 0`) keep
    /// both signed forms; `quat_slerp_checked` resolves such pairs.
    pub fn canonicalized(self) -> Quat {
        if self.w < 0.0 {
            Quat::new(-self.w, -self.x, -self.y, -self.z)
        } else {
            self
        }
    }

    pub fn conjugate(self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn is_unit(self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOL
    }

    pub fn is_finite(self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Hamilton product.
    pub fn mul(self, o: Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    /// Rotate a vector by this quaternion.
    pub fn rotate(self, v: Vec3) -> Vec3 {
        // v' = v + 2 u x (u x v + w v) with u the imaginary part.
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(t)
    }

    /// Rotation angle in radians, in [0, pi].
    pub fn angle(self) -> f64 {
        2.0 * self.w.clamp(-1.0, 1.0).abs().acos()
    }

    /// Build from an orthonormal rotation matrix given as columns.
    pub fn from_rotation_cols(x: Vec3, y: Vec3, z: Vec3) -> Quat {
        // Shepperd's method: pick the largest diagonal combination.
        let trace = x.x + y.y + z.z;
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quat::new(0.25 * s, (y.z - z.y) / s, (z.x - x.z) / s, (x.y - y.x) / s)
        } else if x.x > y.y && x.x > z.z {
            let s = (1.0 + x.x - y.y - z.z).sqrt() * 2.0;
            Quat::new((y.z - z.y) / s, 0.25 * s, (y.x + x.y) / s, (z.x + x.z) / s)
        } else if y.y > z.z {
            let s = (1.0 + y.y - x.x - z.z).sqrt() * 2.0;
            Quat::new((z.x - x.z) / s, (y.x + x.y) / s, 0.25 * s, (z.y + y.z) / s)
        } else {
            let s = (1.0 + z.z - x.x - y.y).sqrt() * 2.0;
            Quat::new((x.y - y.x) / s, (z.x + x.z) / s, (z.y + y.z) / s, 0.25 * s)
        };
        q.normalized().canonicalized()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }
}

/// Result of a spherical interpolation, carrying the degenerate-input
/// flag for antipodal quaternion pairs.
#[derive(Debug, Clone, Copy)]
pub struct SlerpResult {
    pub quat: Quat,
    /// Set when the inputs were (numerically) opposite quaternions and
    /// the arc was resolved by the fixed tie-break rule.
    pub antipodal: bool,
}

/// Spherical linear interpolation along the shorter great-circle arc.
///
/// Inputs must be unit quaternions. Antipodal pairs (dot ~ -1 after
/// sign canonicalization, i.e. the same rotation written with opposite
/// signs) are resolved by flipping the second argument, which collapses
/// the arc to a point; the flag in the result records that this
/// happened.
pub fn quat_slerp_checked(q0: Quat, q1: Quat, t: f64) -> SlerpResult {
    const ANTIPODAL_EPS: f64 = 1e-12;
    const PARALLEL_EPS: f64 = 1e-9;

    let q0 = q0.canonicalized();
    let mut q1 = q1.canonicalized();
    let mut dot = q0.dot(q1);
    let mut antipodal = false;
    if dot < -1.0 + ANTIPODAL_EPS {
        // Same rotation, opposite sign: fixed tie-break is to flip q1.
        q1 = Quat::new(-q1.w, -q1.x, -q1.y, -q1.z);
        dot = -dot;
        antipodal = true;
    } else if dot < 0.0 {
        q1 = Quat::new(-q1.w, -q1.x, -q1.y, -q1.z);
        dot = -dot;
    }

    let quat = if dot > 1.0 - PARALLEL_EPS {
        // Nearly identical: fall back to normalized lerp.
        Quat::new(
            q0.w + (q1.w - q0.w) * t,
            q0.x + (q1.x - q0.x) * t,
            q0.y + (q1.y - q0.y) * t,
            q0.z + (q1.z - q0.z) * t,
        )
        .normalized()
    } else {
        let theta = dot.clamp(-1.0, 1.0).acos();
        let sin_theta = theta.sin();
        let a = ((1.0 - t) * theta).sin() / sin_theta;
        let b = (t * theta).sin() / sin_theta;
        Quat::new(
            a * q0.w + b * q1.w,
            a * q0.x + b * q1.x,
            a * q0.y + b * q1.y,
            a * q0.z + b * q1.z,
        )
        .normalized()
    };
    SlerpResult {
        quat: quat.canonicalized(),
        antipodal,
    }
}

/// [`quat_slerp_checked`] without the metadata.
pub fn quat_slerp(q0: Quat, q1: Quat, t: f64) -> Quat {
    quat_slerp_checked(q0, q1, t).quat
}

// ---------------------------------------------------------------------------
// Pose

/// An SE(3) element: position plus unit orientation quaternion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Quat,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        position: Vec3::ZERO,
        orientation: Quat::IDENTITY,
    };

    /// Build a pose, normalizing and canonicalizing the orientation.
    ///
    /// Returns a validation error for non-finite inputs or a
    /// quaternion too far from unit norm to be a rounding artifact.
    pub fn new(position: Vec3, orientation: Quat) -> Result<Pose> {
        if !position.is_finite() || !orientation.is_finite() {
            return Err(Error::validation("pose with non-finite component"));
        }
        let n = orientation.norm();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "orientation norm {n} too far from 1"
            )));
        }
        Ok(Pose {
            position,
            orientation: orientation.normalized().canonicalized(),
        })
    }

    pub fn from_parts(position: Vec3, orientation: Quat) -> Pose {
        Pose {
            position,
            orientation: orientation.normalized().canonicalized(),
        }
    }

    pub fn translation(position: Vec3) -> Pose {
        Pose {
            position,
            orientation: Quat::IDENTITY,
        }
    }

    /// Rigid composition: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            position: self.position + self.orientation.rotate(other.position),
            orientation: self
                .orientation
                .mul(other.orientation)
                .normalized()
                .canonicalized(),
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv_q = self.orientation.conjugate();
        Pose {
            position: inv_q.rotate(-self.position),
            orientation: inv_q.canonicalized(),
        }
    }

    /// Apply this pose as a rigid transform to a point.
    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        self.position + self.orientation.rotate(p)
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite() && self.orientation.is_finite()
    }

    /// Flattened `[x, y, z, qw, qx, qy, qz]`.
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.position.x,
            self.position.y,
            self.position.z,
            self.orientation.w,
            self.orientation.x,
            self.orientation.y,
            self.orientation.z,
        ]
    }
}

// ---------------------------------------------------------------------------
// Camera model

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::validation("focal lengths must be positive"));
        }
        if cx < 0.0 || cx >= width as f64 || cy < 0.0 || cy >= height as f64 {
            return Err(Error::validation("principal point outside image"));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }
}

/// Rigid transform taking camera-frame coordinates to the robot base
/// frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extrinsics {
    pub camera_to_base: Pose,
}

impl Extrinsics {
    pub const IDENTITY: Extrinsics = Extrinsics {
        camera_to_base: Pose::IDENTITY,
    };

    pub fn new(camera_to_base: Pose) -> Extrinsics {
        Extrinsics { camera_to_base }
    }

    /// Camera placed at `eye` looking at `target`, with the image +x
    /// axis horizontal and +y pointing downward (OpenCV convention, so
    /// depth is the camera-frame z coordinate).
    pub fn look_at(eye: Vec3, target: Vec3) -> Result<Extrinsics> {
        let forward = target - eye;
        if forward.norm() < 1e-9 {
            return Err(Error::validation("look_at eye and target coincide"));
        }
        let z_axis = forward.normalized();
        let world_up = Vec3::new(0.0, 0.0, 1.0);
        let mut x_axis = z_axis.cross(-world_up);
        if x_axis.norm() < 1e-9 {
            // Looking straight up or down; pick a fixed horizontal x.
            x_axis = Vec3::new(1.0, 0.0, 0.0);
        }
        let x_axis = x_axis.normalized();
        let y_axis = z_axis.cross(x_axis);
        let orientation = Quat::from_rotation_cols(x_axis, y_axis, z_axis);
        Ok(Extrinsics {
            camera_to_base: Pose::from_parts(eye, orientation),
        })
    }

    pub fn point_to_base(&self, p_camera: Vec3) -> Vec3 {
        self.camera_to_base.transform_point(p_camera)
    }

    pub fn point_to_camera(&self, p_base: Vec3) -> Vec3 {
        self.camera_to_base.inverse().transform_point(p_base)
    }

    pub fn pose_to_base(&self, p_camera: &Pose) -> Pose {
        self.camera_to_base.compose(p_camera)
    }

    pub fn pose_to_camera(&self, p_base: &Pose) -> Pose {
        self.camera_to_base.inverse().compose(p_base)
    }
}

/// A pixel location plus metric depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelDepthPoint {
    pub u: f64,
    pub v: f64,
    pub d: f64,
}

impl PixelDepthPoint {
    pub fn new(u: f64, v: f64, d: f64, k: &CameraIntrinsics) -> Result<Self> {
        if d <= 0.0 {
            return Err(Error::InvalidDepth(d));
        }
        if !k.contains(u, v) {
            return Err(Error::Validation(format!(
                "pixel ({u}, {v}) outside {}x{} image",
                k.width, k.height
            )));
        }
        Ok(PixelDepthPoint { u, v, d })
    }
}

/// Lift a pixel-plus-depth observation into the camera frame.
pub fn unproject(p: &PixelDepthPoint, k: &CameraIntrinsics) -> Result<Vec3> {
    if p.d <= 0.0 {
        return Err(Error::InvalidDepth(p.d));
    }
    Ok(Vec3::new(
        (p.u - k.cx) * p.d / k.fx,
        (p.v - k.cy) * p.d / k.fy,
        p.d,
    ))
}

/// Project a camera-frame point onto the image plane.
///
/// Fails for points at or behind the camera (`z <= 0`) and for
/// projections landing outside the image bounds.
pub fn project(p_camera: Vec3, k: &CameraIntrinsics) -> Result<PixelDepthPoint> {
    if p_camera.z <= 0.0 {
        return Err(Error::Validation(format!(
            "point behind camera (z = {})",
            p_camera.z
        )));
    }
    let u = k.cx + k.fx * p_camera.x / p_camera.z;
    let v = k.cy + k.fy * p_camera.y / p_camera.z;
    PixelDepthPoint::new(u, v, p_camera.z, k)
}
