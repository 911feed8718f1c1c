//! Sim(3) registration of a local point set against a mixed point/line map:
//! closed-form point alignment, alternating point-to-line alignment, seeded
//! RANSAC, and descriptor-vote candidate retrieval for relocalization and
//! loop detection.

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::geometry::Pose;
use crate::line_cloud::{Line3D, LineCloudMap};
use crate::residuals::CHI2_3_95;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RegistrationError {
    #[error("map has no keyframes or no lines to retrieve against")]
    EmptyMap,
    #[error("correspondence geometry is degenerate for the requested solver")]
    DegenerateConfiguration,
    #[error("alternation produced a non-finite cost from every start")]
    NoConvergence,
    #[error("not enough correspondences for any minimal solver")]
    InsufficientCorrespondences,
    #[error("no model reached the required inlier ratio")]
    NoConsensus,
}

/// 3D-3D correspondence between a local landmark and a map point.
#[derive(Debug, Clone)]
pub struct PointPointPair {
    pub local: Vector3<f64>,
    pub map: Vector3<f64>,
    pub desc_dist: f64,
}

/// 3D-line correspondence between a local landmark and a map line.
#[derive(Debug, Clone)]
pub struct PointLinePair {
    pub local: Vector3<f64>,
    pub line: Line3D,
    pub desc_dist: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CorrespondenceSet {
    pub point_point: Vec<PointPointPair>,
    pub point_line: Vec<PointLinePair>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.point_point.len() + self.point_line.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    P3P,
    P4L,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Local-to-map similarity transform.
    pub sim3: Pose,
    pub solver: SolverKind,
    /// Indices into `point_point` judged inliers.
    pub pp_inliers: Vec<usize>,
    /// Indices into `point_line` judged inliers.
    pub pl_inliers: Vec<usize>,
    /// Mean Mahalanobis norm over all inliers.
    pub mean_inlier_error: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct RansacConfig {
    pub seed: u64,
    pub max_iterations: usize,
    /// Early-exit confidence that at least one all-inlier sample was drawn.
    pub confidence: f64,
    /// Isotropic standard deviation gating point-point residuals, meters.
    pub sigma_point: f64,
    /// Squared-Mahalanobis inlier gate (3-dof residuals).
    pub chi2_gate: f64,
    pub min_inlier_ratio: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_iterations: 500,
            confidence: 0.99,
            sigma_point: 0.05,
            chi2_gate: CHI2_3_95,
            min_inlier_ratio: 0.5,
        }
    }
}

/// Chooses the minimal solver from the correspondence counts alone:
/// point-line alignment when lines dominate points by more than 4:3,
/// otherwise point-point, falling back to whichever family alone meets its
/// minimal sample size. `None` when neither does.
pub fn select_solver(n_pl: usize, n_pp: usize) -> Option<SolverKind> {
    let preferred = if 3 * n_pl > 4 * n_pp {
        SolverKind::P4L
    } else {
        SolverKind::P3P
    };
    match preferred {
        SolverKind::P4L if n_pl >= 4 => Some(SolverKind::P4L),
        SolverKind::P3P if n_pp >= 3 => Some(SolverKind::P3P),
        // The preferred family cannot field a minimal sample; use the other
        // if it can.
        _ if n_pp >= 3 => Some(SolverKind::P3P),
        _ if n_pl >= 4 => Some(SolverKind::P4L),
        _ => None,
    }
}

/// Closed-form least-squares similarity transform `(s, R, t)` minimizing
/// `sum_i || s R a_i + t - b_i ||^2` over pairs `(a_i, b_i)`.
///
/// Pairs are accumulated in a value-sorted order so the result is exactly
/// invariant to re-ordering of the input.
pub fn estimate_sim3_p3p(
    pairs: &[(Vector3<f64>, Vector3<f64>)],
) -> Result<Pose, RegistrationError> {
    if pairs.len() < 3 {
        return Err(RegistrationError::DegenerateConfiguration);
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&i, &j| {
        // Lexicographic on (a, b) with a total order on finite floats.
        let key = |p: &(Vector3<f64>, Vector3<f64>)| {
            [p.0.x, p.0.y, p.0.z, p.1.x, p.1.y, p.1.z]
        };
        let (a, b) = (key(&pairs[i]), key(&pairs[j]));
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let n = pairs.len() as f64;
    let mut mu_a = Vector3::zeros();
    let mut mu_b = Vector3::zeros();
    for &i in &order {
        mu_a += pairs[i].0;
        mu_b += pairs[i].1;
    }
    mu_a /= n;
    mu_b /= n;

    let mut var_a = 0.0;
    let mut cov = Matrix3::zeros();
    for &i in &order {
        let ac = pairs[i].0 - mu_a;
        let bc = pairs[i].1 - mu_b;
        var_a += ac.norm_squared();
        cov += bc * ac.transpose();
    }
    var_a /= n;
    cov /= n;

    if var_a < 1e-18 {
        return Err(RegistrationError::DegenerateConfiguration);
    }
    let svd = cov.svd(true, true);
    let sv = svd.singular_values;
    // Rank < 2 means the pairs are collinear: the rotation about that axis
    // is unobservable.
    if sv[1] <= 1e-9 * sv[0].max(1e-300) {
        return Err(RegistrationError::DegenerateConfiguration);
    }
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let det_sign = (u.determinant() * v_t.determinant()).signum();
    let mut s_mat = Matrix3::identity();
    s_mat[(2, 2)] = det_sign;
    let r = u * s_mat * v_t;
    let scale = (sv[0] + sv[1] + det_sign * sv[2]) / var_a;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(RegistrationError::DegenerateConfiguration);
    }
    let rotation = UnitQuaternion::from_rotation_matrix(
        &nalgebra::Rotation3::from_matrix_unchecked(r),
    );
    let translation = mu_b - scale * (rotation * mu_a);
    Ok(Pose::new(rotation, translation, scale))
}

/// Deterministic rotation starts for the point-to-line alternation:
/// identity, quarter and half turns about each axis, and the two diagonal
/// third-turns.
fn rotation_starts() -> Vec<UnitQuaternion<f64>> {
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, PI};
    let mut starts = vec![UnitQuaternion::identity()];
    for axis in [Vector3::x_axis(), Vector3::y_axis(), Vector3::z_axis()] {
        starts.push(UnitQuaternion::from_axis_angle(&axis, FRAC_PI_2));
        starts.push(UnitQuaternion::from_axis_angle(&axis, PI));
    }
    let diag = Unit::new_normalize(Vector3::new(1.0, 1.0, 1.0));
    starts.push(UnitQuaternion::from_axis_angle(&diag, 2.0 * FRAC_PI_3));
    starts.push(UnitQuaternion::from_axis_angle(&diag, -2.0 * FRAC_PI_3));
    starts
}

fn point_line_cost(pose: &Pose, pairs: &[(Vector3<f64>, &Line3D)]) -> f64 {
    pairs
        .iter()
        .map(|(a, line)| line.mahalanobis_sq(&pose.transform(a)))
        .sum()
}

/// One alternation run: project the transformed points onto their lines,
/// re-align against the foot points, repeat. Returns the best pose and cost
/// seen; `None` if the inner alignment was degenerate at some iteration.
fn alternate_p4l(
    pairs: &[(Vector3<f64>, &Line3D)],
    init: &Pose,
    max_iters: usize,
) -> Option<(Pose, f64)> {
    let mut pose = *init;
    let mut best = (pose, point_line_cost(&pose, pairs));
    if !best.1.is_finite() {
        return None;
    }
    let mut prev_cost = best.1;
    for _ in 0..max_iters {
        let aligned: Vec<(Vector3<f64>, Vector3<f64>)> = pairs
            .iter()
            .map(|(a, line)| {
                let mapped = pose.transform(a);
                let foot = line.point_at(line.closest_tau(&mapped));
                (*a, foot)
            })
            .collect();
        pose = estimate_sim3_p3p(&aligned).ok()?;
        let cost = point_line_cost(&pose, pairs);
        if !cost.is_finite() {
            return None;
        }
        if cost < best.1 {
            best = (pose, cost);
        }
        if (prev_cost - cost).abs() < 1e-12 {
            break;
        }
        prev_cost = cost;
    }
    Some(best)
}

/// Sim(3) from point-line correspondences, minimizing the summed
/// Mahalanobis distances of the transformed points to their lines by
/// alternating foot-point projection and closed-form alignment.
///
/// Without `init`, deterministic multi-start: the rotation set of
/// [`rotation_starts`] (translation chosen to align centroids, unit scale)
/// plus a direct alignment against the line base points.
pub fn estimate_sim3_p4l(
    pairs: &[(Vector3<f64>, &Line3D)],
    init: Option<&Pose>,
) -> Result<Pose, RegistrationError> {
    if pairs.len() < 4 {
        return Err(RegistrationError::DegenerateConfiguration);
    }
    let max_cross = pairs
        .iter()
        .enumerate()
        .flat_map(|(i, (_, li))| {
            pairs[i + 1..]
                .iter()
                .map(move |(_, lj)| li.direction.cross(&lj.direction).norm())
        })
        .fold(0.0_f64, f64::max);
    if max_cross < 1e-6 {
        // All lines parallel: translation along the shared direction is
        // unobservable.
        return Err(RegistrationError::DegenerateConfiguration);
    }

    let starts: Vec<Pose> = match init {
        Some(p) => vec![*p],
        None => {
            let centroid_a =
                pairs.iter().map(|(a, _)| a).sum::<Vector3<f64>>() / pairs.len() as f64;
            let centroid_b = pairs.iter().map(|(_, l)| l.base).sum::<Vector3<f64>>()
                / pairs.len() as f64;
            let mut starts: Vec<Pose> = rotation_starts()
                .into_iter()
                .map(|r| Pose::new(r, centroid_b - r * centroid_a, 1.0))
                .collect();
            let base_pairs: Vec<_> =
                pairs.iter().map(|(a, l)| (*a, l.base)).collect();
            if let Ok(p) = estimate_sim3_p3p(&base_pairs) {
                starts.push(p);
            }
            starts
        }
    };

    let mut best: Option<(Pose, f64)> = None;
    for start in &starts {
        if let Some((pose, cost)) = alternate_p4l(pairs, start, 100) {
            if best.as_ref().map_or(true, |(_, c)| cost < *c) {
                best = Some((pose, cost));
            }
        }
    }
    match best {
        Some((pose, _)) => Ok(pose),
        None => Err(RegistrationError::NoConvergence),
    }
}

fn squared_pp_error(pose: &Pose, pair: &PointPointPair, sigma: f64) -> f64 {
    (pose.transform(&pair.local) - pair.map).norm_squared() / (sigma * sigma)
}

fn classify(
    pose: &Pose,
    corr: &CorrespondenceSet,
    config: &RansacConfig,
) -> (Vec<usize>, Vec<usize>, f64) {
    let mut pp = Vec::new();
    let mut pl = Vec::new();
    let mut err_sum = 0.0;
    for (i, pair) in corr.point_point.iter().enumerate() {
        let m2 = squared_pp_error(pose, pair, config.sigma_point);
        if m2 <= config.chi2_gate {
            pp.push(i);
            err_sum += m2.sqrt();
        }
    }
    for (i, pair) in corr.point_line.iter().enumerate() {
        let m2 = pair.line.mahalanobis_sq(&pose.transform(&pair.local));
        if m2 <= config.chi2_gate {
            pl.push(i);
            err_sum += m2.sqrt();
        }
    }
    let count = pp.len() + pl.len();
    let mean = if count == 0 { f64::INFINITY } else { err_sum / count as f64 };
    (pp, pl, mean)
}

/// Re-estimates the model on a mixed inlier set by alternation: point-point
/// targets stay fixed, point-line targets are refreshed foot points. The
/// alignment is unweighted; the inlier gate has already equalized scales.
fn refine_mixed(
    corr: &CorrespondenceSet,
    pp_idx: &[usize],
    pl_idx: &[usize],
    init: &Pose,
    config: &RansacConfig,
) -> Option<Pose> {
    let mut pose = *init;
    let cost = |p: &Pose| -> f64 {
        pp_idx
            .iter()
            .map(|&i| squared_pp_error(p, &corr.point_point[i], config.sigma_point))
            .sum::<f64>()
            + pl_idx
                .iter()
                .map(|&i| {
                    let pair = &corr.point_line[i];
                    pair.line.mahalanobis_sq(&p.transform(&pair.local))
                })
                .sum::<f64>()
    };
    let mut best = (pose, cost(&pose));
    let mut prev = best.1;
    for _ in 0..100 {
        let mut aligned: Vec<(Vector3<f64>, Vector3<f64>)> = pp_idx
            .iter()
            .map(|&i| (corr.point_point[i].local, corr.point_point[i].map))
            .collect();
        for &i in pl_idx {
            let pair = &corr.point_line[i];
            let mapped = pose.transform(&pair.local);
            let foot = pair.line.point_at(pair.line.closest_tau(&mapped));
            aligned.push((pair.local, foot));
        }
        pose = estimate_sim3_p3p(&aligned).ok()?;
        let c = cost(&pose);
        if !c.is_finite() {
            return None;
        }
        if c < best.1 {
            best = (pose, c);
        }
        if (prev - c).abs() < 1e-12 {
            break;
        }
        prev = c;
    }
    Some(best.0)
}

/// Seeded minimal-sample RANSAC over a mixed correspondence set. The solver
/// family comes from [`select_solver`]; hypotheses are scored by the
/// squared-Mahalanobis gate over all correspondences, and the best model is
/// re-estimated on its inliers.
pub fn ransac_register(
    corr: &CorrespondenceSet,
    config: &RansacConfig,
) -> Result<RegistrationResult, RegistrationError> {
    let n_pp = corr.point_point.len();
    let n_pl = corr.point_line.len();
    let solver = select_solver(n_pl, n_pp)
        .ok_or(RegistrationError::InsufficientCorrespondences)?;
    let sample_size = match solver {
        SolverKind::P3P => 3,
        SolverKind::P4L => 4,
    };
    let total = corr.len();
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);

    let mut best: Option<(Pose, Vec<usize>, Vec<usize>, f64)> = None;
    let mut needed = config.max_iterations;
    let mut iter = 0;
    while iter < needed.min(config.max_iterations) {
        iter += 1;
        let hypothesis = match solver {
            SolverKind::P3P => {
                let idx = rand::seq::index::sample(&mut rng, n_pp, sample_size);
                let sample: Vec<_> = idx
                    .iter()
                    .map(|i| (corr.point_point[i].local, corr.point_point[i].map))
                    .collect();
                estimate_sim3_p3p(&sample)
            }
            SolverKind::P4L => {
                let idx = rand::seq::index::sample(&mut rng, n_pl, sample_size);
                let sample: Vec<_> = idx
                    .iter()
                    .map(|i| (corr.point_line[i].local, &corr.point_line[i].line))
                    .collect();
                estimate_sim3_p4l(&sample, None)
            }
        };
        let pose = match hypothesis {
            Ok(p) => p,
            Err(_) => continue,
        };
        let (pp_in, pl_in, mean) = classify(&pose, corr, config);
        let count = pp_in.len() + pl_in.len();
        let better = match &best {
            None => count > 0,
            Some((_, bp, bl, bm)) => {
                count > bp.len() + bl.len()
                    || (count == bp.len() + bl.len() && mean < *bm)
            }
        };
        if better {
            best = Some((pose, pp_in, pl_in, mean));
            let w = count as f64 / total as f64;
            let p_all_inlier = w.powi(sample_size as i32);
            if p_all_inlier > 1.0 - 1e-12 {
                needed = iter;
            } else if p_all_inlier > 0.0 {
                let est = (1.0 - config.confidence).ln() / (1.0 - p_all_inlier).ln();
                needed = est.ceil() as usize;
            }
        }
    }

    let (pose, pp_in, pl_in, mean) = best.ok_or(RegistrationError::NoConsensus)?;
    let min_count =
        (config.min_inlier_ratio * total as f64).ceil().max(sample_size as f64) as usize;
    if pp_in.len() + pl_in.len() < min_count {
        return Err(RegistrationError::NoConsensus);
    }

    let mut final_pose = pose;
    let mut final_sets = (pp_in.clone(), pl_in.clone(), mean);
    if let Some(refined) = refine_mixed(corr, &pp_in, &pl_in, &pose, config) {
        let (rp, rl, rm) = classify(&refined, corr, config);
        if rp.len() + rl.len() >= pp_in.len() + pl_in.len() {
            final_pose = refined;
            final_sets = (rp, rl, rm);
        }
    }
    if final_sets.0.len() + final_sets.1.len() < min_count {
        return Err(RegistrationError::NoConsensus);
    }
    Ok(RegistrationResult {
        sim3: final_pose,
        solver,
        pp_inliers: final_sets.0,
        pl_inliers: final_sets.1,
        mean_inlier_error: final_sets.2,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct CandidateConfig {
    pub top_k: usize,
    /// Minimum mutual-match votes for a keyframe to be listed.
    pub min_matches: usize,
    /// Maximum descriptor distance for a vote to count.
    pub max_desc_dist: f64,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self { top_k: 5, min_matches: 8, max_desc_dist: 0.7 }
    }
}

fn desc_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Ranks map keyframes by mutual-nearest-neighbor descriptor votes between
/// the query set and each keyframe's visible lines. Returns
/// `(keyframe id, votes)` sorted by votes descending, keyframe id ascending.
pub fn detect_candidates(
    query: &[Vec<f64>],
    map: &LineCloudMap,
    config: &CandidateConfig,
) -> Result<Vec<(u64, usize)>, RegistrationError> {
    if map.keyframes.is_empty() || map.lines.is_empty() {
        return Err(RegistrationError::EmptyMap);
    }
    if query.is_empty() {
        return Ok(Vec::new());
    }
    let mut ranked = Vec::new();
    for entry in &map.visibility {
        let visible: Vec<usize> = entry
            .lines
            .iter()
            .filter(|&&l| (l as usize) < map.lines.len())
            .map(|&l| l as usize)
            .collect();
        if visible.is_empty() {
            continue;
        }
        // Forward pass: nearest visible line per query descriptor.
        let mut fwd: Vec<Option<(usize, f64)>> = vec![None; query.len()];
        for (qi, q) in query.iter().enumerate() {
            for &li in &visible {
                let d = desc_dist(q, &map.lines[li].descriptor);
                if fwd[qi].map_or(true, |(_, bd)| d < bd) {
                    fwd[qi] = Some((li, d));
                }
            }
        }
        // Reverse pass: nearest query descriptor per visible line.
        let mut votes = 0;
        for &li in &visible {
            let mut back: Option<(usize, f64)> = None;
            for (qi, q) in query.iter().enumerate() {
                let d = desc_dist(q, &map.lines[li].descriptor);
                if back.map_or(true, |(_, bd)| d < bd) {
                    back = Some((qi, d));
                }
            }
            if let Some((qi, d)) = back {
                if d <= config.max_desc_dist
                    && fwd[qi].is_some_and(|(l, _)| l == li)
                {
                    votes += 1;
                }
            }
        }
        if votes >= config.min_matches {
            ranked.push((entry.keyframe, votes));
        }
    }
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(config.top_k);
    Ok(ranked)
}
