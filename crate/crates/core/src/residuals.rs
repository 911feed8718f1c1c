//! The three error terms driving registration and bundle adjustment, with
//! analytic Jacobians and a finite-difference checker.
//!
//! All pose Jacobians are laid out over the 7-dof tangent `[omega(3),
//! upsilon(3), sigma(1)]` matching [`Pose::retract`]; rigid SE(3) problems
//! use the leading six columns. Line Jacobians are laid out over the 4-dof
//! tangent `[base_b1, base_b2, dir_b1, dir_b2]` matching [`Line3D::retract`].

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, SMatrix, Vector2, Vector3};

use crate::geometry::{GeometryError, Pose, ProjectionModel, EPS_DEGENERATE};
use crate::line_cloud::{Line3D, VirtualObservation};

/// 95% quantile of the chi-squared distribution with 2 degrees of freedom.
pub const CHI2_2_95: f64 = 5.991464547107979;
/// 95% quantile of the chi-squared distribution with 3 degrees of freedom.
pub const CHI2_3_95: f64 = 7.814727903251179;

pub type Mat2x7 = SMatrix<f64, 2, 7>;
pub type Mat3x4 = SMatrix<f64, 3, 4>;

#[derive(Debug, thiserror::Error)]
pub enum ResidualError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("residual evaluated to a non-finite value")]
    NonFinite,
}

/// Robust kernel thresholds. Each is the residual magnitude (in that term's
/// natural units) beyond which the Huber kernel switches to linear growth;
/// `None` disables the kernel for that term.
#[derive(Debug, Clone, Copy)]
pub struct RobustConfig {
    /// Pixels, applied to the whitened reprojection norm.
    pub huber_reproj: Option<f64>,
    /// Mahalanobis norm of the line attachment term.
    pub huber_attach: Option<f64>,
    /// Raw `1 - |n_L . n_v|` deviation of the virtual observation term.
    pub huber_virtual: Option<f64>,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            huber_reproj: Some(2.45),
            huber_attach: Some(CHI2_3_95.sqrt()),
            huber_virtual: Some(0.01),
        }
    }
}

impl RobustConfig {
    pub fn without_kernels() -> Self {
        Self { huber_reproj: None, huber_attach: None, huber_virtual: None }
    }
}

/// Huber weight for a squared Mahalanobis norm `s` with threshold `delta`
/// on the unsquared norm: 1 in the inlier region, `delta / sqrt(s)` beyond.
pub fn huber_weight(s: f64, delta: Option<f64>) -> f64 {
    match delta {
        Some(d) if s > d * d => d / s.sqrt(),
        _ => 1.0,
    }
}

/// Huber cost for a squared Mahalanobis norm `s`: quadratic inside the
/// threshold, linear outside. Equals `s` when the kernel is disabled.
pub fn huber_cost(s: f64, delta: Option<f64>) -> f64 {
    match delta {
        Some(d) if s > d * d => 2.0 * d * s.sqrt() - d * d,
        _ => s,
    }
}

/// Parameter block a Jacobian differentiates with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKey {
    /// 7 columns `[omega, upsilon, sigma]`; SE(3) callers use the first 6.
    Pose,
    /// 3 columns, the landmark position.
    Landmark,
    /// 4 columns `[base_b1, base_b2, dir_b1, dir_b2]`.
    Line,
}

/// One evaluated error term: raw residual vector, kernel-weighted scalar
/// value, and raw Jacobian blocks keyed by parameter.
#[derive(Debug, Clone)]
pub struct Residual {
    /// `r^T Omega r` after kernel weighting (sum over sub-terms when the
    /// term stacks several blocks).
    pub value: f64,
    pub residual: DVector<f64>,
    pub jacobians: Vec<(BlockKey, DMatrix<f64>)>,
    /// Smallest sub-term kernel weight; 1.0 for inlier-scale residuals.
    pub weight: f64,
}

/// Shared pieces of a reprojection term: the predicted pixel and the raw
/// Jacobians of the pixel with respect to the pose tangent and the point.
/// `pre` left-composes a constant pose (the frozen relative pose of a
/// rigid-stereo group member); the tangent then perturbs the group pose.
pub struct ReprojParts {
    pub pixel: Vector2<f64>,
    pub j_pose: Mat2x7,
    pub j_point: SMatrix<f64, 2, 3>,
}

pub fn reproj_parts(
    pose: &Pose,
    pre: Option<&Pose>,
    x: &Vector3<f64>,
    model: &ProjectionModel,
) -> Result<ReprojParts, GeometryError> {
    let z = pose.transform(x);
    let y = match pre {
        Some(d) => d.transform(&z),
        None => z,
    };
    let j_pi = model.projection_jacobian(&y)?;
    let pixel = model.project(&y)?;
    let m = match pre {
        Some(d) => d.scale * d.rotation.to_rotation_matrix().into_inner(),
        None => Matrix3::identity(),
    };
    let jm = j_pi * m;
    let mut j_pose = Mat2x7::zeros();
    j_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jm * (-skew(&z))));
    j_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&jm);
    j_pose.set_column(6, &(jm * z));
    let j_point =
        jm * (pose.scale * pose.rotation.to_rotation_matrix().into_inner());
    Ok(ReprojParts { pixel, j_pose, j_point })
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// 2D observation of a landmark in a client keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation2D {
    pub keyframe_id: u64,
    pub landmark_id: u64,
    pub pixel: Vector2<f64>,
    /// Pixel-space information matrix, symmetric positive definite.
    pub info: Matrix2<f64>,
}

/// Point reprojection error `|| pi(P, X) - x ||^2_Omega`.
pub fn e_pp(
    pose: &Pose,
    x: &Vector3<f64>,
    obs: &Observation2D,
    model: &ProjectionModel,
    robust: &RobustConfig,
) -> Result<Residual, ResidualError> {
    e_pp_pre(pose, None, x, obs, model, robust)
}

/// [`e_pp`] with an optional frozen left factor: the observing camera sits at
/// `pre * pose` and the pose Jacobian is taken with respect to `pose` alone.
pub fn e_pp_pre(
    pose: &Pose,
    pre: Option<&Pose>,
    x: &Vector3<f64>,
    obs: &Observation2D,
    model: &ProjectionModel,
    robust: &RobustConfig,
) -> Result<Residual, ResidualError> {
    let parts = reproj_parts(pose, pre, x, model)?;
    let r = parts.pixel - obs.pixel;
    let s = (r.transpose() * obs.info * r)[0];
    if !s.is_finite() {
        return Err(ResidualError::NonFinite);
    }
    let w = huber_weight(s, robust.huber_reproj);
    Ok(Residual {
        value: w * s,
        residual: DVector::from_column_slice(r.as_slice()),
        jacobians: vec![
            (BlockKey::Pose, to_dyn(&parts.j_pose)),
            (BlockKey::Landmark, to_dyn(&parts.j_point)),
        ],
        weight: w,
    })
}

/// Line-attached reprojection error: the reprojection of the reconstructed
/// point `Xp` plus its Mahalanobis attachment to the line,
/// `e_pP(P, Xp, x) + || Xp - p_L ||^2_{Omega_L}`.
///
/// Residual rows 0..2 are the pixel term, rows 2..5 the attachment offset
/// `Xp - p_L` to the closest point on the line (perpendicular to the line
/// by construction, so its squared information norm equals the Mahalanobis
/// distance even if the stored information matrix lags the direction).
/// The line Jacobian is nonzero only when the line itself is optimized
/// (global BA); other solvers ignore that block.
pub fn e_pl(
    pose: &Pose,
    xp: &Vector3<f64>,
    obs: &Observation2D,
    line: &Line3D,
    model: &ProjectionModel,
    robust: &RobustConfig,
) -> Result<Residual, ResidualError> {
    e_pl_pre(pose, None, xp, obs, line, model, robust)
}

/// [`e_pl`] with an optional frozen left factor, as in [`e_pp_pre`].
pub fn e_pl_pre(
    pose: &Pose,
    pre: Option<&Pose>,
    xp: &Vector3<f64>,
    obs: &Observation2D,
    line: &Line3D,
    model: &ProjectionModel,
    robust: &RobustConfig,
) -> Result<Residual, ResidualError> {
    let parts = reproj_parts(pose, pre, xp, model)?;
    let r_px = parts.pixel - obs.pixel;
    let offset = xp - line.base;
    let r_at = offset - line.direction * line.direction.dot(&offset);

    let s_px = (r_px.transpose() * obs.info * r_px)[0];
    let s_at = line.mahalanobis_sq(xp);
    if !(s_px.is_finite() && s_at.is_finite()) {
        return Err(ResidualError::NonFinite);
    }
    let w_px = huber_weight(s_px, robust.huber_reproj);
    let w_at = huber_weight(s_at, robust.huber_attach);

    let mut residual = DVector::zeros(5);
    residual.fixed_rows_mut::<2>(0).copy_from(&r_px);
    residual.fixed_rows_mut::<3>(2).copy_from(&r_at);

    let mut j_pose = DMatrix::zeros(5, 7);
    j_pose.view_mut((0, 0), (2, 7)).copy_from(&to_dyn(&parts.j_pose));

    let mut j_point = DMatrix::zeros(5, 3);
    j_point.view_mut((0, 0), (2, 3)).copy_from(&to_dyn(&parts.j_point));
    j_point.view_mut((2, 0), (3, 3)).copy_from(
        &(Matrix3::identity() - line.direction * line.direction.transpose()),
    );

    let mut j_line = DMatrix::zeros(5, 4);
    j_line
        .view_mut((2, 0), (3, 4))
        .copy_from(&to_dyn(&attach_line_jacobian(line, xp)));

    Ok(Residual {
        value: w_px * s_px + w_at * s_at,
        residual,
        jacobians: vec![
            (BlockKey::Pose, j_pose),
            (BlockKey::Landmark, j_point),
            (BlockKey::Line, j_line),
        ],
        weight: w_px.min(w_at),
    })
}

/// Jacobian of the attachment residual `Xp - p_L` with respect to the line
/// tangent. Base motion enters directly. A direction tilt toward `b_k`
/// sweeps the closest point sideways with lever arm `tau` (the signed
/// distance of `Xp` along the line), which is what lets attachment terms
/// rotate a free line; the remaining component lies along the direction and
/// carries no Mahalanobis weight.
pub fn attach_line_jacobian(line: &Line3D, xp: &Vector3<f64>) -> Mat3x4 {
    let (b1, b2) = line.tangent_basis();
    let d = line.direction;
    let o = xp - line.base;
    let tau = d.dot(&o);
    let mut j = Mat3x4::zeros();
    j.set_column(0, &(-b1));
    j.set_column(1, &(-b2));
    j.set_column(2, &(-(b1 * tau) - d * b1.dot(&o)));
    j.set_column(3, &(-(b2 * tau) - d * b2.dot(&o)));
    j
}

/// Virtual observation error `|| 1 - n_L(P_ks, L) . n_v ||^2_{omega_vL}`,
/// with the plane normal flipped into the hemisphere of `n_v` at each
/// evaluation to resolve the sign ambiguity.
pub fn e_vl(
    pose_ks: &Pose,
    line: &Line3D,
    vobs: &VirtualObservation,
    robust: &RobustConfig,
) -> Result<Residual, ResidualError> {
    let p_c = pose_ks.transform(&line.base);
    let d_c = pose_ks.rotate(&line.direction);
    let c = p_c.cross(&d_c);
    let c_norm = c.norm();
    if c_norm < EPS_DEGENERATE {
        return Err(GeometryError::DegenerateLine.into());
    }
    let n = c / c_norm;
    let dot = n.dot(&vobs.normal);
    let sign = if dot >= 0.0 { 1.0 } else { -1.0 };
    let r = 1.0 - sign * dot;
    let s = vobs.weight * r * r;
    if !s.is_finite() {
        return Err(ResidualError::NonFinite);
    }
    // The kernel threshold is expressed on the raw deviation.
    let w = huber_weight(r * r, robust.huber_virtual);

    // dr = -sign * n_v^T * dn,  dn = (I - n n^T)/|c| * dc,
    // dc = -[d_c]x dp_c + [p_c]x dd_c.
    let g = (Matrix3::identity() - n * n.transpose()) / c_norm;
    let lead = -sign * (vobs.normal.transpose() * g);
    let a = -skew(&d_c);
    let b = skew(&p_c);

    let mut j_pose = DMatrix::zeros(1, 7);
    let dc_domega = a * (-skew(&p_c)) + b * (-skew(&d_c));
    j_pose.view_mut((0, 0), (1, 3)).copy_from(&(lead * dc_domega));
    j_pose.view_mut((0, 3), (1, 3)).copy_from(&(lead * a));
    j_pose[(0, 6)] = (lead * (a * p_c))[0];

    let (b1, b2) = line.tangent_basis();
    let rot = pose_ks.rotation.to_rotation_matrix().into_inner();
    let sr = pose_ks.scale * rot;
    let p = line.base;
    let d = line.direction;
    let dp_w = Mat3x4::from_columns(&[b1, b2, -(p.dot(&b1)) * d, -(p.dot(&b2)) * d]);
    let dd_w = Mat3x4::from_columns(&[Vector3::zeros(), Vector3::zeros(), b1, b2]);
    let dc_dline = a * (sr * dp_w) + b * (rot * dd_w);
    let j_line = DMatrix::from_row_slice(1, 4, (lead * dc_dline).as_slice());

    Ok(Residual {
        value: w * s,
        residual: DVector::from_element(1, r),
        jacobians: vec![(BlockKey::Pose, j_pose), (BlockKey::Line, j_line)],
        weight: w,
    })
}

fn to_dyn<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_iterator(R, C, m.iter().copied())
}

/// Compares an analytic Jacobian against central finite differences of
/// `residual_fn` over local tangent increments, returning the worst
/// discrepancy relative to the scale of the finite-difference matrix.
///
/// `residual_fn` receives a tangent increment and must evaluate the residual
/// at the correspondingly retracted parameters.
pub fn check_jacobian<F>(
    residual_fn: F,
    dim: usize,
    analytic: &DMatrix<f64>,
    step: f64,
) -> Result<f64, ResidualError>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>, ResidualError>,
{
    assert_eq!(analytic.ncols(), dim, "Jacobian dimensions must match parameter block");
    let rows = analytic.nrows();
    let mut fd = DMatrix::zeros(rows, dim);
    for i in 0..dim {
        let mut delta = DVector::zeros(dim);
        delta[i] = step;
        let hi = residual_fn(&delta)?;
        delta[i] = -step;
        let lo = residual_fn(&delta)?;
        if hi.iter().chain(lo.iter()).any(|v| !v.is_finite()) {
            return Err(ResidualError::NonFinite);
        }
        fd.set_column(i, &((hi - lo) / (2.0 * step)));
    }
    let scale = fd.iter().fold(1.0_f64, |a, &v| a.max(v.abs()));
    let worst = (analytic - &fd).iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
    Ok(worst / scale)
}
