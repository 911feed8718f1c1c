use nalgebra::{UnitQuaternion, Vector3};

use super::{GeometryError, EPS_DEGENERATE};

/// Similarity transform `y = s * (R * x) + t`.
///
/// With `scale == 1` this is a rigid SE(3) transform. Keyframe extrinsics are
/// stored in this form mapping world coordinates to camera coordinates;
/// registration and pose graph corrections use the full Sim(3) group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
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
            scale: 1.0,
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>, scale: f64) -> Self {
        Self {
            rotation,
            translation,
            scale,
        }
    }

    /// Rigid transform (scale 1).
    pub fn from_rt(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self::new(rotation, translation, 1.0)
    }

    /// Rigid world-to-camera pose of a camera at `center` with orientation
    /// `rotation` (world-to-camera): `t = -R * center`.
    pub fn from_rotation_center(rotation: UnitQuaternion<f64>, center: Vector3<f64>) -> Self {
        Self::from_rt(rotation, -(rotation * center))
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Rotates a direction vector; scale and translation do not apply.
    pub fn rotate(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * d
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
            scale: self.scale * other.scale,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv_scale = 1.0 / self.scale;
        let inv_rot = self.rotation.inverse();
        Pose {
            rotation: inv_rot,
            translation: -inv_scale * (inv_rot * self.translation),
            scale: inv_scale,
        }
    }

    /// Retraction used by the optimizers: left-composes a small rotation
    /// `exp(omega^)`, translation `upsilon`, and scale factor `exp(sigma)`.
    /// This is a chart around the current pose, not the coupled group
    /// exponential; Jacobians throughout the crate match this chart.
    pub fn retract(&self, omega: &Vector3<f64>, upsilon: &Vector3<f64>, sigma: f64) -> Pose {
        let delta = Pose {
            rotation: UnitQuaternion::from_scaled_axis(*omega),
            translation: *upsilon,
            scale: sigma.exp(),
        };
        delta.compose(self)
    }

    /// Inverse of [`Pose::retract`] at the identity: rotation as a scaled
    /// axis, translation, and log scale. Zero iff the pose is the identity.
    pub fn log_decoupled(&self) -> (Vector3<f64>, Vector3<f64>, f64) {
        (self.rotation.scaled_axis(), self.translation, self.scale.ln())
    }

    /// Camera center in the source frame for a world-to-camera pose:
    /// the preimage of the origin.
    pub fn center(&self) -> Vector3<f64> {
        self.inverse().transform(&Vector3::zeros())
    }

    /// Folds the scale into the translation, keeping every viewing ray (and
    /// therefore every projection) identical: `(sR, t) -> (R, t / s)`.
    pub fn normalized_se3(&self) -> Pose {
        Pose::from_rt(self.rotation, self.translation / self.scale)
    }

    /// Geodesic rotation distance to another pose, in radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }
}

/// Unit normal of the plane spanned by the camera center and a 3D line.
///
/// `pose` maps world to camera; `base` and `dir` define the line in world
/// coordinates. The normal is expressed in the camera frame. Fails when the
/// camera center lies on the line (plane undefined).
pub fn plane_normal(
    pose: &Pose,
    base: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Result<Vector3<f64>, GeometryError> {
    let p_c = pose.transform(base);
    let d_c = pose.rotate(dir);
    let n = p_c.cross(&d_c);
    let norm = n.norm();
    if norm < EPS_DEGENERATE {
        return Err(GeometryError::DegenerateLine);
    }
    Ok(n / norm)
}
