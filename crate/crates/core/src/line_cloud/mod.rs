//! Lifting 3D points to privacy-preserving 3D lines.
//!
//! A line cloud map stores, per landmark, only a line of random direction
//! through the landmark plus an information matrix whose null space is the
//! line direction. The base point is canonicalized to the point on the line
//! closest to the world origin, so the record is independent of where on the
//! line the generating point sat.

pub(crate) mod io;

pub use io::{load_map, save_map, MapIoError, MAP_SCHEMA_VERSION};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, UnitSphere};

use crate::geometry::{plane_normal, GeometryError, Pose, ProjectionModel};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LiftError {
    #[error("covariance has eigenvalue below -1e-9; not positive semidefinite")]
    NotPsd,
    #[error("direction vector has near-zero norm")]
    DegenerateDirection,
}

/// A 3D line `p + tau * d` with an information matrix annihilating `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Line3D {
    /// Base point, canonicalized to the closest point to the world origin.
    pub base: Vector3<f64>,
    /// Unit direction.
    pub direction: Vector3<f64>,
    /// Information matrix of Mahalanobis distances to the line;
    /// `info * direction = 0`.
    pub info: Matrix3<f64>,
    pub descriptor: Vec<f64>,
}

impl Line3D {
    /// Builds a line through `point` with the given direction; the stored
    /// base point is re-canonicalized and the information matrix derived
    /// from `sigma`.
    pub fn from_point_direction(
        point: &Vector3<f64>,
        direction: &Vector3<f64>,
        sigma: &Matrix3<f64>,
        descriptor: Vec<f64>,
    ) -> Result<Self, LiftError> {
        let norm = direction.norm();
        if norm < crate::geometry::EPS_DEGENERATE {
            return Err(LiftError::DegenerateDirection);
        }
        let d = direction / norm;
        let info = line_information_matrix(sigma, &d)?;
        Ok(Self {
            base: canonical_base(point, &d),
            direction: d,
            info,
            descriptor,
        })
    }

    pub fn point_at(&self, tau: f64) -> Vector3<f64> {
        self.base + tau * self.direction
    }

    /// Line parameter of the point on the line closest to `x`.
    pub fn closest_tau(&self, x: &Vector3<f64>) -> f64 {
        (x - self.base).dot(&self.direction)
    }

    /// Euclidean distance from `x` to the line.
    pub fn distance_to(&self, x: &Vector3<f64>) -> f64 {
        let r = x - self.base;
        (r - r.dot(&self.direction) * self.direction).norm()
    }

    /// Squared Mahalanobis distance of `x` to the line under the information
    /// matrix. The offset is projected onto the plane orthogonal to the
    /// direction before weighting: the information matrix annihilates the
    /// direction only up to rounding, and without the projection a large
    /// along-line component (sliding `x` by hundreds of meters) would leak
    /// through the residual null space.
    pub fn mahalanobis_sq(&self, x: &Vector3<f64>) -> f64 {
        let r = x - self.base;
        let q = r - r.dot(&self.direction) * self.direction;
        (q.transpose() * self.info * q)[0]
    }

    /// Symmetric PSD square root of the information matrix, used to whiten
    /// attachment residuals.
    pub fn info_sqrt(&self) -> Matrix3<f64> {
        psd_sqrt(&self.info)
    }

    /// Deterministic orthonormal basis of the plane orthogonal to the
    /// direction; the local parameterization of both the base point and the
    /// direction during optimization.
    pub fn tangent_basis(&self) -> (Vector3<f64>, Vector3<f64>) {
        line_tangent_basis(&self.direction)
    }

    /// Applies a 4-dof tangent increment: base point moves in-plane, the
    /// direction moves on the unit sphere, and the base is re-canonicalized.
    /// The information matrix is kept as-is (it is held fixed during a
    /// solve); use [`Line3D::with_transported_info`] when committing.
    pub fn retract(&self, delta: &nalgebra::Vector4<f64>) -> Line3D {
        let (b1, b2) = self.tangent_basis();
        let dir = (self.direction + delta[2] * b1 + delta[3] * b2).normalize();
        let moved = self.base + delta[0] * b1 + delta[1] * b2;
        Line3D {
            base: canonical_base(&moved, &dir),
            direction: dir,
            info: self.info,
            descriptor: self.descriptor.clone(),
        }
    }

    /// Rotates the information matrix with the minimal rotation carrying
    /// `old_dir` onto the current direction, so its null space tracks the
    /// direction after a solve moved it. Exact for isotropic covariances.
    pub fn with_transported_info(mut self, old_dir: &Vector3<f64>) -> Line3D {
        if let Some(q) =
            nalgebra::UnitQuaternion::rotation_between(old_dir, &self.direction)
        {
            let r = q.to_rotation_matrix();
            let info = r * self.info * r.transpose();
            self.info = 0.5 * (info + info.transpose());
        }
        self
    }
}

/// Orthonormal basis `(b1, b2)` spanning the plane orthogonal to `d`,
/// chosen deterministically from the smallest component of `d`.
pub fn line_tangent_basis(d: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let axis = if d.x.abs() <= d.y.abs() && d.x.abs() <= d.z.abs() {
        Vector3::x()
    } else if d.y.abs() <= d.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let b1 = d.cross(&axis).normalize();
    let b2 = d.cross(&b1);
    (b1, b2)
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// from rounding are clamped to zero.
pub fn psd_sqrt(m: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = m.symmetric_eigen();
    let mut out = Matrix3::zeros();
    for i in 0..3 {
        let lambda = eig.eigenvalues[i].max(0.0);
        let v = eig.eigenvectors.column(i);
        out += lambda.sqrt() * v * v.transpose();
    }
    out
}

/// Projects `x` onto the plane through the origin orthogonal to `d`,
/// yielding the point on the line closest to the origin. Applied twice so
/// the residual along-line component is at rounding level.
pub fn canonical_base(x: &Vector3<f64>, d: &Vector3<f64>) -> Vector3<f64> {
    let p = x - x.dot(d) * d;
    p - p.dot(d) * d
}

/// Information matrix of a 3D line: the pseudo-inverse of the point
/// covariance projected onto the plane orthogonal to the line direction,
/// `{(I - d d^T) Sigma (I - d d^T)}^+`.
pub fn line_information_matrix(
    sigma: &Matrix3<f64>,
    direction: &Vector3<f64>,
) -> Result<Matrix3<f64>, LiftError> {
    let d = direction.normalize();
    let sym = 0.5 * (sigma + sigma.transpose());
    let projector = Matrix3::identity() - d * d.transpose();
    let projected = projector * sym * projector;

    let eig = projected.symmetric_eigen();
    let max_abs = eig.eigenvalues.iter().fold(0.0_f64, |a, &l| a.max(l.abs()));
    if eig.eigenvalues.iter().any(|&l| l < -1e-9) {
        return Err(LiftError::NotPsd);
    }
    // Also reject indefinite inputs whose negativity was masked by the
    // projection.
    let sig_eig = sym.symmetric_eigen();
    if sig_eig.eigenvalues.iter().any(|&l| l < -1e-9) {
        return Err(LiftError::NotPsd);
    }

    let tol = max_abs * 1e-12;
    let mut pinv = Matrix3::zeros();
    for i in 0..3 {
        let lambda = eig.eigenvalues[i];
        if lambda > tol {
            let v = eig.eigenvectors.column(i);
            pinv += (1.0 / lambda) * v * v.transpose();
        }
    }
    // Re-project so the null space contains `d` at rounding level even for
    // ill-conditioned covariances.
    let pinv = projector * pinv * projector;
    Ok(0.5 * (pinv + pinv.transpose()))
}

/// Lifts a 3D point to a line with a direction drawn uniformly from the unit
/// sphere. The along-line coordinate of `point` is discarded by the base
/// point canonicalization.
pub fn lift_point_to_line<R: Rng>(
    point: &Vector3<f64>,
    sigma: &Matrix3<f64>,
    descriptor: Vec<f64>,
    rng: &mut R,
) -> Result<Line3D, LiftError> {
    let s: [f64; 3] = UnitSphere.sample(rng);
    let d = Vector3::new(s[0], s[1], s[2]);
    Line3D::from_point_direction(point, &d, sigma, descriptor)
}

/// Per-keyframe record of the plane spanned by a server camera center and a
/// line at map creation time; the only line-to-keyframe constraint kept
/// after 2D observations are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualObservation {
    pub keyframe: u64,
    pub line: u64,
    /// Unit normal in the keyframe's camera frame.
    pub normal: Vector3<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerKeyframe {
    pub id: u64,
    /// World-to-camera pose.
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityEntry {
    pub keyframe: u64,
    /// Indices into the line table.
    pub lines: Vec<u64>,
}

/// The serializable privacy-safe map: server keyframes, lines, virtual
/// observations, and the visibility table. Carries no 2D observations and no
/// original 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct LineCloudMap {
    pub model: ProjectionModel,
    pub keyframes: Vec<ServerKeyframe>,
    pub lines: Vec<Line3D>,
    pub virtual_observations: Vec<VirtualObservation>,
    pub visibility: Vec<VisibilityEntry>,
}

impl LineCloudMap {
    pub fn keyframe(&self, id: u64) -> Option<&ServerKeyframe> {
        self.keyframes.iter().find(|k| k.id == id)
    }

    /// Checks every stored invariant; returns a description of the first
    /// violation found.
    pub fn validate(&self) -> Result<(), String> {
        let mut desc_len: Option<usize> = None;
        for (i, line) in self.lines.iter().enumerate() {
            if (line.direction.norm() - 1.0).abs() > 1e-9 {
                return Err(format!("line {i}: direction is not unit"));
            }
            if (line.info * line.direction).norm() > 1e-9 {
                return Err(format!("line {i}: info matrix does not annihilate direction"));
            }
            if (line.info - line.info.transpose()).norm() > 1e-9 {
                return Err(format!("line {i}: info matrix is not symmetric"));
            }
            let eig = line.info.symmetric_eigen();
            if eig.eigenvalues.iter().any(|&l| l < -1e-9) {
                return Err(format!("line {i}: info matrix is not PSD"));
            }
            if line.base.dot(&line.direction).abs() > 1e-6 * line.base.norm() {
                return Err(format!("line {i}: base point is not canonical"));
            }
            if !line.base.iter().chain(line.info.iter()).all(|v| v.is_finite()) {
                return Err(format!("line {i}: non-finite field"));
            }
            match desc_len {
                None => desc_len = Some(line.descriptor.len()),
                Some(n) if n != line.descriptor.len() => {
                    return Err(format!("line {i}: descriptor length differs"));
                }
                _ => {}
            }
        }
        let n_lines = self.lines.len() as u64;
        for (i, v) in self.virtual_observations.iter().enumerate() {
            if self.keyframe(v.keyframe).is_none() {
                return Err(format!("virtual observation {i}: unknown keyframe {}", v.keyframe));
            }
            if v.line >= n_lines {
                return Err(format!("virtual observation {i}: unknown line {}", v.line));
            }
            if (v.normal.norm() - 1.0).abs() > 1e-9 {
                return Err(format!("virtual observation {i}: normal is not unit"));
            }
            if !(v.weight > 0.0) {
                return Err(format!("virtual observation {i}: weight must be positive"));
            }
        }
        let mut seen = vec![false; self.lines.len()];
        for entry in &self.visibility {
            if self.keyframe(entry.keyframe).is_none() {
                return Err(format!("visibility entry references unknown keyframe {}", entry.keyframe));
            }
            for &l in &entry.lines {
                if l >= n_lines {
                    return Err(format!("visibility entry references unknown line {l}"));
                }
                seen[l as usize] = true;
            }
        }
        if let Some(orphan) = seen.iter().position(|s| !s) {
            return Err(format!("line {orphan} is visible from no keyframe"));
        }
        Ok(())
    }
}

/// Builds one virtual observation per visible (keyframe, line) pair.
/// Pairs where the keyframe center lies on the line are skipped; the count
/// of skipped pairs is returned alongside.
pub fn make_virtual_observations(
    keyframes: &[ServerKeyframe],
    lines: &[Line3D],
    visibility: &[VisibilityEntry],
    weight: f64,
) -> (Vec<VirtualObservation>, usize) {
    let mut obs = Vec::new();
    let mut skipped = 0;
    for entry in visibility {
        let Some(kf) = keyframes.iter().find(|k| k.id == entry.keyframe) else {
            skipped += entry.lines.len();
            continue;
        };
        for &line_id in &entry.lines {
            let Some(line) = lines.get(line_id as usize) else {
                skipped += 1;
                continue;
            };
            match plane_normal(&kf.pose, &line.base, &line.direction) {
                Ok(normal) => obs.push(VirtualObservation {
                    keyframe: entry.keyframe,
                    line: line_id,
                    normal,
                    weight,
                }),
                Err(GeometryError::DegenerateLine) => skipped += 1,
                Err(_) => skipped += 1,
            }
        }
    }
    (obs, skipped)
}
