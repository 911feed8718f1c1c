use nalgebra::{Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::EPS_DEGENERATE;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GeometryError {
    /// Perspective and fisheye projection require `z > EPS_DEGENERATE`.
    #[error("point is behind the camera")]
    BehindCamera,
    /// Point too close to the camera center to define a bearing.
    #[error("point is degenerate (norm below threshold)")]
    DegeneratePoint,
    /// Pixel outside the image bounds.
    #[error("pixel is outside the image bounds")]
    OutOfBounds,
    /// The camera center lies on the line; no plane is defined.
    #[error("line passes through the camera center")]
    DegenerateLine,
}

/// Intrinsic camera model mapping camera-frame points to pixels.
///
/// Camera frame convention: `x` right, `y` down, `z` forward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProjectionModel {
    /// Pinhole: `u = fx * x / z + cx`.
    Perspective {
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: f64,
        height: f64,
    },
    /// Equidistant fisheye: radial pixel distance grows linearly with the
    /// polar angle, `r = f * theta`.
    FisheyeEquidistant {
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: f64,
        height: f64,
    },
    /// Full 360x180 panorama: longitude and latitude of the bearing map
    /// linearly to `u` and `v`.
    Equirectangular { width: f64, height: f64 },
}

impl ProjectionModel {
    pub fn width(&self) -> f64 {
        match *self {
            ProjectionModel::Perspective { width, .. }
            | ProjectionModel::FisheyeEquidistant { width, .. }
            | ProjectionModel::Equirectangular { width, .. } => width,
        }
    }

    pub fn height(&self) -> f64 {
        match *self {
            ProjectionModel::Perspective { height, .. }
            | ProjectionModel::FisheyeEquidistant { height, .. }
            | ProjectionModel::Equirectangular { height, .. } => height,
        }
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.x < self.width() && pixel.y >= 0.0 && pixel.y < self.height()
    }

    /// Projects a camera-frame point to a pixel. Does not check image bounds;
    /// combine with [`ProjectionModel::contains`] for visibility tests.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        match *self {
            ProjectionModel::Perspective { fx, fy, cx, cy, .. } => {
                if p.z <= EPS_DEGENERATE {
                    return Err(GeometryError::BehindCamera);
                }
                Ok(Vector2::new(fx * p.x / p.z + cx, fy * p.y / p.z + cy))
            }
            ProjectionModel::FisheyeEquidistant { fx, fy, cx, cy, .. } => {
                if p.z <= EPS_DEGENERATE {
                    return Err(GeometryError::BehindCamera);
                }
                let rho = p.x.hypot(p.y);
                if rho < EPS_DEGENERATE * p.z.abs() {
                    // On the optical axis the azimuth is undefined but the
                    // projection is the principal point.
                    return Ok(Vector2::new(cx, cy));
                }
                let theta = rho.atan2(p.z);
                let scale = theta / rho;
                Ok(Vector2::new(fx * scale * p.x + cx, fy * scale * p.y + cy))
            }
            ProjectionModel::Equirectangular { width, height } => {
                let norm = p.norm();
                if norm < EPS_DEGENERATE {
                    return Err(GeometryError::DegeneratePoint);
                }
                let mut lon = p.x.atan2(p.z);
                if lon >= PI {
                    lon = -PI;
                }
                let lat = (p.y / norm).asin();
                Ok(Vector2::new(
                    (lon / (2.0 * PI) + 0.5) * width,
                    (lat / PI + 0.5) * height,
                ))
            }
        }
    }

    /// Inverts the projection for an in-bounds pixel, returning a unit
    /// bearing in the camera frame.
    pub fn unproject(&self, pixel: &Vector2<f64>) -> Result<Vector3<f64>, GeometryError> {
        if !self.contains(pixel) {
            return Err(GeometryError::OutOfBounds);
        }
        match *self {
            ProjectionModel::Perspective { fx, fy, cx, cy, .. } => {
                let ray = Vector3::new((pixel.x - cx) / fx, (pixel.y - cy) / fy, 1.0);
                Ok(ray.normalize())
            }
            ProjectionModel::FisheyeEquidistant { fx, fy, cx, cy, .. } => {
                let mx = (pixel.x - cx) / fx;
                let my = (pixel.y - cy) / fy;
                let theta = mx.hypot(my);
                if theta < EPS_DEGENERATE {
                    return Ok(Vector3::new(0.0, 0.0, 1.0));
                }
                let (s, c) = theta.sin_cos();
                Ok(Vector3::new(s * mx / theta, s * my / theta, c))
            }
            ProjectionModel::Equirectangular { width, height } => {
                let lon = (pixel.x / width - 0.5) * 2.0 * PI;
                let lat = (pixel.y / height - 0.5) * PI;
                let (sin_lon, cos_lon) = lon.sin_cos();
                let (sin_lat, cos_lat) = lat.sin_cos();
                Ok(Vector3::new(sin_lon * cos_lat, sin_lat, cos_lon * cos_lat))
            }
        }
    }

    /// Jacobian of [`ProjectionModel::project`] with respect to the
    /// camera-frame point, evaluated where the projection is defined.
    pub fn projection_jacobian(&self, p: &Vector3<f64>) -> Result<Matrix2x3<f64>, GeometryError> {
        match *self {
            ProjectionModel::Perspective { fx, fy, .. } => {
                if p.z <= EPS_DEGENERATE {
                    return Err(GeometryError::BehindCamera);
                }
                let inv_z = 1.0 / p.z;
                let inv_z2 = inv_z * inv_z;
                Ok(Matrix2x3::new(
                    fx * inv_z,
                    0.0,
                    -fx * p.x * inv_z2,
                    0.0,
                    fy * inv_z,
                    -fy * p.y * inv_z2,
                ))
            }
            ProjectionModel::FisheyeEquidistant { fx, fy, .. } => {
                if p.z <= EPS_DEGENERATE {
                    return Err(GeometryError::BehindCamera);
                }
                let rho2 = p.x * p.x + p.y * p.y;
                let rho = rho2.sqrt();
                let r2 = rho2 + p.z * p.z;
                if rho < 1e-9 * p.z.abs() {
                    // Pinhole limit on the optical axis.
                    let inv_z = 1.0 / p.z;
                    return Ok(Matrix2x3::new(fx * inv_z, 0.0, 0.0, 0.0, fy * inv_z, 0.0));
                }
                let theta = rho.atan2(p.z);
                let rho3 = rho2 * rho;
                let a = theta / rho3;
                let b = p.z / (rho2 * r2);
                // d(theta * x / rho) / d(x, y, z)
                let dxx = a * p.y * p.y + b * p.x * p.x;
                let dxy = -a * p.x * p.y + b * p.x * p.y;
                let dxz = -p.x / r2;
                let dyy = a * p.x * p.x + b * p.y * p.y;
                let dyz = -p.y / r2;
                Ok(Matrix2x3::new(
                    fx * dxx,
                    fx * dxy,
                    fx * dxz,
                    fy * dxy,
                    fy * dyy,
                    fy * dyz,
                ))
            }
            ProjectionModel::Equirectangular { width, height } => {
                let norm = p.norm();
                if norm < EPS_DEGENERATE {
                    return Err(GeometryError::DegeneratePoint);
                }
                let hxz2 = p.x * p.x + p.z * p.z;
                if hxz2 < EPS_DEGENERATE * EPS_DEGENERATE {
                    // Bearing at a pole: longitude (and its derivative) is
                    // undefined.
                    return Err(GeometryError::DegeneratePoint);
                }
                let ku = width / (2.0 * PI);
                let kv = height / PI;
                let du = Vector3::new(p.z / hxz2, 0.0, -p.x / hxz2) * ku;
                let r2 = norm * norm;
                let hxz = hxz2.sqrt();
                let dv = Vector3::new(
                    -p.x * p.y / (r2 * hxz),
                    hxz / r2,
                    -p.z * p.y / (r2 * hxz),
                ) * kv;
                Ok(Matrix2x3::new(du.x, du.y, du.z, dv.x, dv.y, dv.z))
            }
        }
    }
}
