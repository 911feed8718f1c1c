//! 2D-3D data association for tracking: adaptive line discretization,
//! windowed grid-indexed matching, ray-line reconstruction of attachment
//! points, and the exhaustive curve-distance baseline used for speed
//! comparisons.

use std::collections::HashMap;

use nalgebra::{Vector2, Vector3};

use crate::geometry::{GeometryError, Pose, ProjectionModel};
use crate::line_cloud::Line3D;

#[derive(Debug, thiserror::Error)]
pub enum MatchingError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("viewing ray is parallel to the line")]
    ParallelRayLine,
}

/// One detected 2D feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub pixel: Vector2<f64>,
    pub descriptor: Vec<f64>,
}

/// All features of one frame plus the camera model that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservations {
    pub frame_id: u64,
    pub timestamp: f64,
    pub features: Vec<Feature>,
    pub model: ProjectionModel,
}

impl FrameObservations {
    /// Checks that pixels are in bounds and descriptor lengths are uniform.
    pub fn validate(&self) -> Result<(), String> {
        let mut len = None;
        for (i, f) in self.features.iter().enumerate() {
            if !self.model.contains(&f.pixel) {
                return Err(format!("feature {i}: pixel out of bounds"));
            }
            match len {
                None => len = Some(f.descriptor.len()),
                Some(n) if n != f.descriptor.len() => {
                    return Err(format!("feature {i}: descriptor length differs"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Map point offered to the matcher for one frame.
#[derive(Debug, Clone)]
pub struct LocalPoint {
    pub id: u64,
    pub position: Vector3<f64>,
    pub descriptor: Vec<f64>,
}

/// Map line offered to the matcher for one frame.
#[derive(Debug, Clone)]
pub struct LocalLine {
    pub id: u64,
    pub line: Line3D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointMatch {
    pub feature: usize,
    pub landmark: u64,
    pub desc_dist: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineMatch {
    pub feature: usize,
    pub line: u64,
    /// The discretized 3D sample whose projection won the window search.
    pub sample: Vector3<f64>,
    pub sample_pixel: Vector2<f64>,
    pub desc_dist: f64,
}

/// One-to-one assignment between frame features and map primitives.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub points: Vec<PointMatch>,
    pub lines: Vec<LineMatch>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.points.len() + self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MatchConfig {
    /// Window radius around each projected target, pixels.
    pub radius_px: f64,
    pub max_desc_dist: f64,
    /// Upper bound on the gap between consecutive line samples, pixels.
    pub step_px: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { radius_px: 6.0, max_desc_dist: 0.7, step_px: 2.0 }
    }
}

impl MatchConfig {
    /// Widened window used when re-entering the map after tracking loss.
    pub fn relocalization() -> Self {
        Self { radius_px: 12.0, ..Self::default() }
    }
}

pub fn descriptor_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Depth window (meters) bounding the visible parameter interval of a line
/// for perspective and fisheye cameras; equirectangular uses the outer bound
/// as a range ball and the inner one to stay clear of the camera center.
const DEPTH_MIN: f64 = 0.1;
const DEPTH_MAX: f64 = 100.0;

/// Parameter interval of `p0 + tau * v` with `|p| <= r`, if any.
fn ball_interval(p0: &Vector3<f64>, v: &Vector3<f64>, r: f64) -> Option<(f64, f64)> {
    let a = v.norm_squared();
    if a < 1e-24 {
        return if p0.norm() <= r { Some((f64::MIN, f64::MAX)) } else { None };
    }
    let b = 2.0 * p0.dot(v);
    let c = p0.norm_squared() - r * r;
    let disc = b * b - 4.0 * a * c;
    if disc <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    Some(((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)))
}

fn intersect(a: Option<(f64, f64)>, b: Option<(f64, f64)>) -> Option<(f64, f64)> {
    let (a0, a1) = a?;
    let (b0, b1) = b?;
    let lo = a0.max(b0);
    let hi = a1.min(b1);
    (hi > lo).then_some((lo, hi))
}

/// Parameter interval where the linear function `alpha * tau + beta` is
/// nonnegative (or nonpositive when `geq` is false).
fn half_line_interval(alpha: f64, beta: f64, geq: bool) -> Option<(f64, f64)> {
    let (alpha, beta) = if geq { (alpha, beta) } else { (-alpha, -beta) };
    if alpha.abs() < 1e-15 {
        return (beta >= 0.0).then_some((f64::MIN, f64::MAX));
    }
    let root = -beta / alpha;
    if alpha > 0.0 {
        Some((root, f64::MAX))
    } else {
        Some((f64::MIN, root))
    }
}

fn depth_interval(p0: &Vector3<f64>, v: &Vector3<f64>) -> Option<(f64, f64)> {
    if v.z.abs() < 1e-12 {
        if p0.z < DEPTH_MIN || p0.z > DEPTH_MAX {
            return None;
        }
        Some((f64::MIN, f64::MAX))
    } else {
        let t1 = (DEPTH_MIN - p0.z) / v.z;
        let t2 = (DEPTH_MAX - p0.z) / v.z;
        Some((t1.min(t2), t1.max(t2)))
    }
}

/// Candidate parameter interval of the line in front of the camera.
/// `p0`/`v` are the camera-frame base point and per-parameter velocity.
///
/// For perspective cameras the image-bounds constraints are linear in the
/// parameter once depth is positive, so the returned interval is exactly the
/// visible one. For fisheye and equirectangular it is the depth/range clip
/// only; in-bounds clipping happens during the adaptive walk.
fn visible_interval(
    p0: &Vector3<f64>,
    v: &Vector3<f64>,
    model: &ProjectionModel,
) -> Option<(f64, f64)> {
    let outer = ball_interval(p0, v, DEPTH_MAX);
    match *model {
        ProjectionModel::Equirectangular { .. } => {
            let outer = outer?;
            // Carve out the near-center neighborhood; keep the longer side.
            match ball_interval(p0, v, DEPTH_MIN) {
                Some((e0, e1)) => {
                    let left = (outer.0, e0.min(outer.1));
                    let right = (e1.max(outer.0), outer.1);
                    let pick = if left.1 - left.0 >= right.1 - right.0 { left } else { right };
                    (pick.1 > pick.0).then_some(pick)
                }
                None => Some(outer),
            }
        }
        ProjectionModel::Perspective { fx, fy, cx, cy, width, height } => {
            // With z > 0 enforced by the depth clip, `0 <= fx*x/z + cx < w`
            // and its vertical twin multiply through by z into four linear
            // constraints.
            let mut interval = intersect(outer, depth_interval(p0, v));
            let constraints = [
                (fx * v.x + cx * v.z, fx * p0.x + cx * p0.z, true),
                (fx * v.x + (cx - width) * v.z, fx * p0.x + (cx - width) * p0.z, false),
                (fy * v.y + cy * v.z, fy * p0.y + cy * p0.z, true),
                (fy * v.y + (cy - height) * v.z, fy * p0.y + (cy - height) * p0.z, false),
            ];
            for (alpha, beta, geq) in constraints {
                interval = intersect(interval, half_line_interval(alpha, beta, geq));
            }
            interval
        }
        ProjectionModel::FisheyeEquidistant { .. } => {
            intersect(outer, depth_interval(p0, v))
        }
    }
}

struct CurveSample {
    tau: f64,
    pixel: Vector2<f64>,
    bearing: Vector3<f64>,
    visible: bool,
}

fn eval_curve(tau: f64, p0: &Vector3<f64>, v: &Vector3<f64>, model: &ProjectionModel) -> CurveSample {
    let q = p0 + tau * v;
    match model.project(&q) {
        Ok(pixel) => CurveSample {
            tau,
            pixel,
            bearing: q.normalize(),
            visible: model.contains(&pixel),
        },
        Err(_) => CurveSample { tau, pixel: Vector2::zeros(), bearing: Vector3::z(), visible: false },
    }
}

/// Distance between two curve samples in the metric the step bound is
/// stated in: raw pixels for perspective/fisheye, great-circle angle scaled
/// to pixels for equirectangular (the seam and the poles make raw pixel
/// distances meaningless there).
fn sample_gap(a: &CurveSample, b: &CurveSample, model: &ProjectionModel) -> f64 {
    match model {
        ProjectionModel::Equirectangular { width, height } => {
            let px_per_rad = (width / std::f64::consts::TAU).max(height / std::f64::consts::PI);
            let angle = a
                .bearing
                .cross(&b.bearing)
                .norm()
                .atan2(a.bearing.dot(&b.bearing));
            angle * px_per_rad
        }
        _ => (a.pixel - b.pixel).norm(),
    }
}

/// Discretizes the visible part of a line into 3D samples whose consecutive
/// projections are at most `step_px` apart, by adaptive bisection of the
/// parameter interval. Returns the longest contiguous visible run; empty
/// when nothing is visible.
pub fn discretize_line(
    line: &Line3D,
    pose: &Pose,
    model: &ProjectionModel,
    step_px: f64,
) -> Vec<(Vector3<f64>, Vector2<f64>)> {
    let p0 = pose.transform(&line.base);
    let v = pose.scale * (pose.rotation * line.direction);
    let Some((lo, hi)) = visible_interval(&p0, &v, model) else {
        return Vec::new();
    };

    struct Walker<'a> {
        p0: Vector3<f64>,
        v: Vector3<f64>,
        model: &'a ProjectionModel,
        step_px: f64,
        runs: Vec<Vec<(f64, Vector2<f64>)>>,
        current: Vec<(f64, Vector2<f64>)>,
    }
    impl Walker<'_> {
        fn break_run(&mut self) {
            if !self.current.is_empty() {
                self.runs.push(std::mem::take(&mut self.current));
            }
        }
        fn emit(&mut self, s: &CurveSample) {
            self.current.push((s.tau, s.pixel));
        }
        /// Subdivides until consecutive visible samples satisfy the gap
        /// bound; segments with both endpoints invisible are treated as
        /// gaps (the initial grid is fine enough that visible islands
        /// between two invisible grid points are negligible). A run break
        /// is recorded wherever the curve leaves visibility.
        fn walk(&mut self, a: &CurveSample, b: &CurveSample, depth: u32) {
            if a.visible && b.visible && sample_gap(a, b, self.model) <= self.step_px {
                self.emit(b);
                return;
            }
            if !a.visible && !b.visible {
                self.break_run();
                return;
            }
            if depth == 0 {
                // Resolution floor: either a visibility boundary or (in
                // principle) a projection discontinuity; keep the gap
                // guarantee by starting a new run.
                self.break_run();
                if b.visible {
                    self.emit(b);
                }
                return;
            }
            let m = eval_curve(0.5 * (a.tau + b.tau), &self.p0, &self.v, self.model);
            self.walk(a, &m, depth - 1);
            self.walk(&m, b, depth - 1);
        }
    }

    let mut w = Walker {
        p0,
        v,
        model,
        step_px,
        runs: Vec::new(),
        current: Vec::new(),
    };
    // Perspective intervals are exact, so a coarse seed suffices; the other
    // models rely on the seed grid to localize the visible stretches.
    let n0 = match model {
        ProjectionModel::Perspective { .. } => 16,
        _ => 256,
    };
    let grid: Vec<CurveSample> = (0..=n0)
        .map(|i| eval_curve(lo + (hi - lo) * i as f64 / n0 as f64, &p0, &v, model))
        .collect();
    if grid[0].visible {
        w.emit(&grid[0]);
    }
    for pair in grid.windows(2) {
        w.walk(&pair[0], &pair[1], 24);
    }
    w.break_run();

    let best = w.runs.into_iter().max_by_key(|r| r.len()).unwrap_or_default();
    best.iter()
        .map(|&(tau, pixel)| (line.point_at(tau), pixel))
        .collect()
}

/// Midpoint of the common perpendicular between the viewing ray through
/// `pixel` and the 3D line; the initial position of a reconstructed
/// attachment point.
/// Midpoint of the common perpendicular between the viewing rays of one
/// point seen from two cameras. Returns `None` for rays closer than
/// `min_angle` to parallel or for intersections behind either camera.
pub fn triangulate_two_view(
    pose_a: &Pose,
    pixel_a: &Vector2<f64>,
    pose_b: &Pose,
    pixel_b: &Vector2<f64>,
    model: &ProjectionModel,
    min_angle: f64,
) -> Option<Vector3<f64>> {
    let da_c = model.unproject(pixel_a).ok()?;
    let db_c = model.unproject(pixel_b).ok()?;
    let da = pose_a.rotation.inverse() * da_c;
    let db = pose_b.rotation.inverse() * db_c;
    if da.cross(&db).norm() < min_angle.sin() {
        return None;
    }
    let oa = pose_a.center();
    let ob = pose_b.center();
    let w = oa - ob;
    let a = da.dot(&da);
    let b = da.dot(&db);
    let c = db.dot(&db);
    let d = da.dot(&w);
    let e = db.dot(&w);
    let denom = a * c - b * b;
    if denom < 1e-12 {
        return None;
    }
    let s = (b * e - c * d) / denom;
    let t = (a * e - b * d) / denom;
    if s <= 0.0 || t <= 0.0 {
        return None;
    }
    Some(0.5 * ((oa + da * s) + (ob + db * t)))
}

pub fn reconstruct_point_on_line(
    pixel: &Vector2<f64>,
    pose: &Pose,
    line: &Line3D,
    model: &ProjectionModel,
) -> Result<Vector3<f64>, MatchingError> {
    let bearing = model.unproject(pixel)?;
    let cam_to_world = pose.inverse();
    let center = cam_to_world.transform(&Vector3::zeros());
    let u = (cam_to_world.rotation * bearing).normalize();
    let d = line.direction;
    let w0 = center - line.base;
    let b = u.dot(&d);
    let denom = 1.0 - b * b;
    if denom < 1e-8 {
        return Err(MatchingError::ParallelRayLine);
    }
    let d0 = u.dot(&w0);
    let e = d.dot(&w0);
    let lambda = (b * e - d0) / denom;
    let tau = (e - b * d0) / denom;
    let on_ray = center + lambda * u;
    let on_line = line.point_at(tau);
    Ok(0.5 * (on_ray + on_line))
}

/// Candidate prior to one-to-one resolution, ordered by
/// `(descriptor distance, feature index, target kind, target id)`.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    dist: f64,
    feature: usize,
    is_line: bool,
    target: usize,
    sample: usize,
}

fn resolve_greedy(
    mut candidates: Vec<Candidate>,
    n_features: usize,
    points: &[LocalPoint],
    lines: &[LocalLine],
    samples: &[Vec<(Vector3<f64>, Vector2<f64>)>],
) -> MatchSet {
    candidates.sort_by(|a, b| {
        a.dist
            .total_cmp(&b.dist)
            .then(a.feature.cmp(&b.feature))
            .then(a.is_line.cmp(&b.is_line))
            .then(a.target.cmp(&b.target))
    });
    let mut feature_used = vec![false; n_features];
    let mut point_used = vec![false; points.len()];
    let mut line_used = vec![false; lines.len()];
    let mut out = MatchSet::default();
    for c in candidates {
        if feature_used[c.feature] {
            continue;
        }
        if c.is_line {
            if line_used[c.target] {
                continue;
            }
            line_used[c.target] = true;
            feature_used[c.feature] = true;
            let (sample, sample_pixel) = samples[c.target][c.sample];
            out.lines.push(LineMatch {
                feature: c.feature,
                line: lines[c.target].id,
                sample,
                sample_pixel,
                desc_dist: c.dist,
            });
        } else {
            if point_used[c.target] {
                continue;
            }
            point_used[c.target] = true;
            feature_used[c.feature] = true;
            out.points.push(PointMatch {
                feature: c.feature,
                landmark: points[c.target].id,
                desc_dist: c.dist,
            });
        }
    }
    out
}

/// Uniform grid over feature pixels for window queries. Cell size equals the
/// window radius; a query inspects the 3x3 neighborhood.
struct FeatureGrid {
    cell: f64,
    bins: HashMap<(i64, i64), Vec<usize>>,
}

impl FeatureGrid {
    fn build(features: &[Feature], cell: f64) -> Self {
        let mut bins: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, f) in features.iter().enumerate() {
            let key = ((f.pixel.x / cell).floor() as i64, (f.pixel.y / cell).floor() as i64);
            bins.entry(key).or_default().push(i);
        }
        Self { cell, bins }
    }

    /// Feature indices within the 3x3 cell neighborhood of `pixel`, in
    /// ascending index order per cell, cells in fixed scan order.
    fn near(&self, pixel: &Vector2<f64>, out: &mut Vec<usize>) {
        out.clear();
        let cx = (pixel.x / self.cell).floor() as i64;
        let cy = (pixel.y / self.cell).floor() as i64;
        for dy in -1..=1 {
            for dx in -1..=1 {
                if let Some(v) = self.bins.get(&(cx + dx, cy + dy)) {
                    out.extend_from_slice(v);
                }
            }
        }
    }
}

/// Windowed matching of frame features against projected map points and
/// discretized map lines under a predicted pose. Candidates within
/// `radius_px` of a projection and `max_desc_dist` of its descriptor are
/// resolved one-to-one greedily by ascending descriptor distance.
pub fn match_frame(
    frame: &FrameObservations,
    local_points: &[LocalPoint],
    local_lines: &[LocalLine],
    predicted_pose: &Pose,
    config: &MatchConfig,
) -> MatchSet {
    let model = &frame.model;
    let grid = FeatureGrid::build(&frame.features, config.radius_px.max(1.0));
    let mut near = Vec::new();
    let mut candidates = Vec::new();

    for (pi, point) in local_points.iter().enumerate() {
        let Ok(pixel) = model.project(&predicted_pose.transform(&point.position)) else {
            continue;
        };
        if !model.contains(&pixel) {
            continue;
        }
        grid.near(&pixel, &mut near);
        for &fi in &near {
            let f = &frame.features[fi];
            if (f.pixel - pixel).norm() > config.radius_px {
                continue;
            }
            let dist = descriptor_distance(&f.descriptor, &point.descriptor);
            if dist <= config.max_desc_dist {
                candidates.push(Candidate {
                    dist,
                    feature: fi,
                    is_line: false,
                    target: pi,
                    sample: 0,
                });
            }
        }
    }

    let samples: Vec<Vec<(Vector3<f64>, Vector2<f64>)>> = local_lines
        .iter()
        .map(|l| discretize_line(&l.line, predicted_pose, model, config.step_px))
        .collect();
    for (li, local_line) in local_lines.iter().enumerate() {
        // Track only the spatially closest sample per (feature, line): a
        // line may pair with each feature at most once, and the descriptor
        // gate is per line, not per sample.
        let mut best_per_feature: HashMap<usize, (f64, usize)> = HashMap::new();
        for (si, (_, pixel)) in samples[li].iter().enumerate() {
            grid.near(pixel, &mut near);
            for &fi in &near {
                let gap = (frame.features[fi].pixel - pixel).norm();
                if gap > config.radius_px {
                    continue;
                }
                let entry = best_per_feature.entry(fi).or_insert((f64::INFINITY, 0));
                if gap < entry.0 {
                    *entry = (gap, si);
                }
            }
        }
        let mut per_feature: Vec<(usize, (f64, usize))> =
            best_per_feature.into_iter().collect();
        per_feature.sort_by_key(|(fi, _)| *fi);
        for (fi, (_, si)) in per_feature {
            let dist = descriptor_distance(
                &frame.features[fi].descriptor,
                &local_line.line.descriptor,
            );
            if dist <= config.max_desc_dist {
                candidates.push(Candidate {
                    dist,
                    feature: fi,
                    is_line: true,
                    target: li,
                    sample: si,
                });
            }
        }
    }

    resolve_greedy(candidates, frame.features.len(), local_points, local_lines, &samples)
}

/// Exact minimum distance (in the step metric) from a pixel to the projected
/// curve of a line: dense scan plus golden-section refinement. Exhaustive on
/// purpose; the baseline for the windowed matcher's speed claim.
pub fn point_to_projected_curve_distance(
    pixel: &Vector2<f64>,
    line: &Line3D,
    pose: &Pose,
    model: &ProjectionModel,
) -> Option<(f64, f64)> {
    let p0 = pose.transform(&line.base);
    let v = pose.scale * (pose.rotation * line.direction);
    let (lo, hi) = visible_interval(&p0, &v, model)?;
    let dist_at = |tau: f64| -> f64 {
        let s = eval_curve(tau, &p0, &v, model);
        if s.visible {
            (s.pixel - pixel).norm()
        } else {
            f64::INFINITY
        }
    };
    let n = 256;
    let mut best = (f64::INFINITY, lo);
    for i in 0..=n {
        let tau = lo + (hi - lo) * i as f64 / n as f64;
        let d = dist_at(tau);
        if d < best.0 {
            best = (d, tau);
        }
    }
    if !best.0.is_finite() {
        return None;
    }
    let span = (hi - lo) / n as f64;
    let (mut a, mut b) = (best.1 - span, best.1 + span);
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut c, mut d) = (b - phi * (b - a), a + phi * (b - a));
    let (mut fc, mut fd) = (dist_at(c), dist_at(d));
    for _ in 0..60 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = dist_at(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = dist_at(d);
        }
    }
    let tau = 0.5 * (a + b);
    let final_d = dist_at(tau);
    if final_d < best.0 {
        best = (final_d, tau);
    }
    Some(best)
}

/// Exhaustive baseline matcher: every feature is tested against every map
/// point by projection distance and against every line by exact
/// point-to-projected-curve distance, with the same gates and the same
/// greedy resolution as [`match_frame`].
pub fn naive_match_frame(
    frame: &FrameObservations,
    local_points: &[LocalPoint],
    local_lines: &[LocalLine],
    predicted_pose: &Pose,
    config: &MatchConfig,
) -> MatchSet {
    let model = &frame.model;
    let mut candidates = Vec::new();
    for (pi, point) in local_points.iter().enumerate() {
        let Ok(pixel) = model.project(&predicted_pose.transform(&point.position)) else {
            continue;
        };
        if !model.contains(&pixel) {
            continue;
        }
        for (fi, f) in frame.features.iter().enumerate() {
            if (f.pixel - pixel).norm() > config.radius_px {
                continue;
            }
            let dist = descriptor_distance(&f.descriptor, &point.descriptor);
            if dist <= config.max_desc_dist {
                candidates.push(Candidate {
                    dist,
                    feature: fi,
                    is_line: false,
                    target: pi,
                    sample: 0,
                });
            }
        }
    }

    let mut samples: Vec<Vec<(Vector3<f64>, Vector2<f64>)>> =
        vec![Vec::new(); local_lines.len()];
    for (li, local_line) in local_lines.iter().enumerate() {
        for (fi, f) in frame.features.iter().enumerate() {
            let Some((d_px, tau)) = point_to_projected_curve_distance(
                &f.pixel,
                &local_line.line,
                predicted_pose,
                model,
            ) else {
                continue;
            };
            if d_px > config.radius_px {
                continue;
            }
            let dist = descriptor_distance(&f.descriptor, &local_line.line.descriptor);
            if dist > config.max_desc_dist {
                continue;
            }
            let world = local_line.line.point_at(tau);
            let pixel = model
                .project(&predicted_pose.transform(&world))
                .unwrap_or(f.pixel);
            samples[li].push((world, pixel));
            candidates.push(Candidate {
                dist,
                feature: fi,
                is_line: true,
                target: li,
                sample: samples[li].len() - 1,
            });
        }
    }
    resolve_greedy(candidates, frame.features.len(), local_points, local_lines, &samples)
}
