//! Rigid-body poses and the ground-aligned local frame used for per-frame maps.
//!
//! Quaternions are Hamilton, stored (w, x, y, z), and rotate vectors from the
//! sensor/body frame into the global frame.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Serialized size of a [`Pose`]: stamp, translation, quaternion as 8 little-endian f64.
pub const POSE_BYTES: usize = 64;

/// Angular distance from vertical below which the body heading is undefined.
pub const DEGENERATE_ATTITUDE_RAD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub stamp: f64,
    pub translation: Vec3,
    pub rotation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn new(stamp: f64, translation: Vec3, rotation: UnitQuaternion<f64>) -> Self {
        Self { stamp, translation, rotation }
    }

    pub fn identity() -> Self {
        Self::new(0.0, Vec3::zeros(), UnitQuaternion::identity())
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(0.0, Vec3::new(x, y, z), UnitQuaternion::identity())
    }

    /// Builds a pose from a raw (w, x, y, z) quaternion, normalizing it.
    pub fn from_wxyz(stamp: f64, translation: Vec3, q: [f64; 4]) -> Result<Self> {
        let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = raw.norm();
        if !norm.is_finite() || norm < 1e-12 || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::format(format!("invalid pose: t={translation:?} q={q:?}")));
        }
        Ok(Self::new(stamp, translation, UnitQuaternion::from_quaternion(raw)))
    }

    /// Pose from yaw (about z), pitch (about y), roll (about x), applied z-y-x.
    pub fn from_ypr(stamp: f64, translation: Vec3, yaw: f64, pitch: f64, roll: f64) -> Self {
        Self::new(stamp, translation, UnitQuaternion::from_euler_angles(roll, pitch, yaw))
    }

    pub fn with_stamp(mut self, stamp: f64) -> Self {
        self.stamp = stamp;
        self
    }

    /// `(w, x, y, z)`
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// Applies `other` first, then `self`. The result carries `other`'s stamp.
    pub fn compose(&self, other: &Pose) -> Pose {
        let translation = self.rotation * other.translation + self.translation;
        let q = self.rotation.quaternion() * other.rotation.quaternion();
        Pose::new(other.stamp, translation, UnitQuaternion::from_quaternion(q))
    }

    pub fn inverse(&self) -> Pose {
        let rotation = self.rotation.inverse();
        Pose::new(self.stamp, -(rotation * self.translation), rotation)
    }

    pub fn transform_point(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn to_le_bytes(&self) -> [u8; POSE_BYTES] {
        let q = self.wxyz();
        let vals = [self.stamp, self.translation.x, self.translation.y, self.translation.z, q[0], q[1], q[2], q[3]];
        let mut out = [0u8; POSE_BYTES];
        for (chunk, v) in out.chunks_exact_mut(8).zip(vals) {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8; POSE_BYTES]) -> Result<Pose> {
        let mut vals = [0f64; 8];
        for (v, chunk) in vals.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        Pose::from_wxyz(vals[0], Vec3::new(vals[1], vals[2], vals[3]), [vals[4], vals[5], vals[6], vals[7]])
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Ground-aligned per-frame coordinate system: origin on the ground under the
/// body, heading equal to the vehicle bearing, and no roll or pitch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    pub origin: Vec3,
    pub yaw: f64,
}

impl LocalFrame {
    pub fn new(origin: Vec3, yaw: f64) -> Self {
        Self { origin, yaw }
    }

    /// Pure z-axis rotation taking local vectors to global ones.
    pub fn rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.yaw)
    }

    pub fn to_local(&self, global: &Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        let d = global - self.origin;
        Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    pub fn to_global(&self, local: &Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(
            c * local.x - s * local.y + self.origin.x,
            s * local.x + c * local.y + self.origin.y,
            local.z + self.origin.z,
        )
    }
}

/// Places the local frame on the ground `ground_offset` meters below the body,
/// with yaw taken from the body x-axis projected onto the global xy-plane.
pub fn derive_local_frame(body: &Pose, ground_offset: f64) -> Result<LocalFrame> {
    if !(ground_offset >= 0.0) {
        return Err(Error::Config(format!("ground offset must be >= 0, got {ground_offset}")));
    }
    let x_axis = body.rotation * Vec3::x();
    let horizontal = x_axis.x.hypot(x_axis.y);
    let angle_from_vertical = horizontal.atan2(x_axis.z.abs());
    if angle_from_vertical < DEGENERATE_ATTITUDE_RAD {
        return Err(Error::DegenerateAttitude { angle_from_vertical });
    }
    let yaw = x_axis.y.atan2(x_axis.x);
    let t = body.translation;
    Ok(LocalFrame::new(Vec3::new(t.x, t.y, t.z - ground_offset), yaw))
}
