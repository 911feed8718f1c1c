//! Shared fixtures and a dense Gauss-Newton reference solver used by the
//! integration suites to cross-check the sparse Levenberg-Marquardt backend.
//!
//! The reference solver is deliberately naive: residuals are stacked into a
//! single dense vector, Jacobians come from central finite differences, and
//! each step solves the full normal equations through an SVD pseudo-inverse
//! followed by a backtracking line search. No damping, no block elimination,
//! no analytic derivatives, no robust kernels (build problems with
//! `RobustConfig::without_kernels()` before handing them to either solver).

#![allow(dead_code)]

use lineslam::geometry::Pose;
use lineslam::optim::{Problem, Term};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3, Vector4};

#[derive(Clone, Copy)]
enum Block {
    Pose(usize),
    Point(usize),
    Line(usize),
}

/// Free tangent coordinates of a problem: (block, offset, dimension).
struct Layout {
    blocks: Vec<(Block, usize, usize)>,
    total: usize,
}

fn layout(problem: &Problem) -> Layout {
    let mut blocks = Vec::new();
    let mut total = 0;
    for (i, p) in problem.poses.iter().enumerate() {
        if !p.fixed {
            let dim = if p.sim3 { 7 } else { 6 };
            blocks.push((Block::Pose(i), total, dim));
            total += dim;
        }
    }
    for (i, p) in problem.points.iter().enumerate() {
        if !p.fixed {
            blocks.push((Block::Point(i), total, 3));
            total += 3;
        }
    }
    for (i, l) in problem.lines.iter().enumerate() {
        if !l.fixed {
            blocks.push((Block::Line(i), total, 4));
            total += 4;
        }
    }
    Layout { blocks, total }
}

fn retracted(problem: &Problem, lay: &Layout, step: &DVector<f64>) -> Problem {
    let mut out = problem.clone();
    for &(block, off, dim) in &lay.blocks {
        match block {
            Block::Pose(i) => {
                let omega = Vector3::new(step[off], step[off + 1], step[off + 2]);
                let upsilon = Vector3::new(step[off + 3], step[off + 4], step[off + 5]);
                let sigma = if dim == 7 { step[off + 6] } else { 0.0 };
                out.poses[i].pose = out.poses[i].pose.retract(&omega, &upsilon, sigma);
            }
            Block::Point(i) => {
                out.points[i].position +=
                    Vector3::new(step[off], step[off + 1], step[off + 2]);
            }
            Block::Line(i) => {
                let d = Vector4::new(step[off], step[off + 1], step[off + 2], step[off + 3]);
                out.lines[i].line = out.lines[i].line.retract(&d);
            }
        }
    }
    out
}

fn sqrt_sym2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let eig = nalgebra::SymmetricEigen::new(*m);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * Matrix2::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn sqrt_sym3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = nalgebra::SymmetricEigen::new(*m);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * Matrix3::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn effective(pose: &Pose, pre: &Option<Pose>) -> Pose {
    match pre {
        Some(d) => d.compose(pose),
        None => *pose,
    }
}

/// Stacked whitened residual vector, `None` when some term cannot be
/// evaluated (a trial step pushed a point out of the projection domain).
fn try_residual_vector(problem: &Problem) -> Option<DVector<f64>> {
    let mut out = Vec::new();
    for term in &problem.terms {
        match term {
            Term::Reproj { pose, pre, point, pixel, info } => {
                let cam = effective(&problem.poses[*pose].pose, pre);
                let y = cam.transform(&problem.points[*point].position);
                let px = problem.model.project(&y).ok()?;
                let r = sqrt_sym2(info) * (px - pixel);
                out.extend([r.x, r.y]);
            }
            Term::ReprojLine { pose, pre, point, line, pixel, info } => {
                let cam = effective(&problem.poses[*pose].pose, pre);
                let xp = problem.points[*point].position;
                let y = cam.transform(&xp);
                let px = problem.model.project(&y).ok()?;
                let rp = sqrt_sym2(info) * (px - pixel);
                out.extend([rp.x, rp.y]);
                let l = &problem.lines[*line].line;
                let o = xp - l.base;
                let perp = o - l.direction * l.direction.dot(&o);
                let ra = sqrt_sym3(&l.info) * perp;
                out.extend([ra.x, ra.y, ra.z]);
            }
            Term::Virtual { pose, line, normal, weight } => {
                let l = &problem.lines[*line].line;
                let p = problem.poses[*pose].pose.transform(&l.base);
                let d = problem.poses[*pose].pose.rotate(&l.direction);
                let n = p.cross(&d);
                if n.norm() < 1e-12 {
                    return None;
                }
                let r = 1.0 - (n / n.norm()).dot(normal).abs();
                out.push(weight.sqrt() * r);
            }
            Term::PointPrior { point, target, sqrt_info } => {
                let r = sqrt_info * (problem.points[*point].position - target);
                out.extend([r.x, r.y, r.z]);
            }
            Term::Sim3Edge { pose_i, pose_j, measured } => {
                let pi = &problem.poses[*pose_i].pose;
                let pj = &problem.poses[*pose_j].pose;
                let err = measured.inverse().compose(&pi.inverse().compose(pj));
                let omega = err.rotation.scaled_axis();
                out.extend([omega.x, omega.y, omega.z]);
                out.extend([err.translation.x, err.translation.y, err.translation.z]);
                out.push(err.scale.ln());
            }
        }
    }
    Some(DVector::from_vec(out))
}

/// Panicking variant for states that must be evaluable: the incoming
/// problem and tiny finite-difference probes around it.
fn residual_vector(problem: &Problem) -> DVector<f64> {
    try_residual_vector(problem).expect("fixture left the projection domain")
}

/// Total cost under the same objective the sparse solver minimizes
/// (robust kernels disabled).
pub fn dense_cost(problem: &Problem) -> f64 {
    residual_vector(problem).norm_squared()
}

fn fd_jacobian(problem: &Problem, lay: &Layout, h: f64) -> DMatrix<f64> {
    let rows = residual_vector(problem).len();
    let mut j = DMatrix::zeros(rows, lay.total);
    for k in 0..lay.total {
        let mut dp = DVector::zeros(lay.total);
        dp[k] = h;
        let rp = residual_vector(&retracted(problem, lay, &dp));
        dp[k] = -h;
        let rm = residual_vector(&retracted(problem, lay, &dp));
        j.set_column(k, &((rp - rm) / (2.0 * h)));
    }
    j
}

pub struct DenseReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Accepted steps.
    pub iterations: usize,
    pub trace: Vec<f64>,
}

/// Minimizes the problem by dense damped Gauss-Newton: full normal
/// equations from finite-difference Jacobians, a scalar diagonal damping
/// adapted by accept/reject, no block structure anywhere. Free lines get
/// their information matrix re-aligned to the current direction at the
/// start of every iteration, mirroring the solver under test.
pub fn dense_gn_solve(problem: &Problem, max_iterations: usize) -> (Problem, DenseReport) {
    let mut cur = problem.clone();
    let mut info_dirs: Vec<Vector3<f64>> =
        cur.lines.iter().map(|l| l.line.direction).collect();
    let lay = layout(&cur);
    assert!(lay.total > 0, "no free parameters");
    let initial_cost = residual_vector(&cur).norm_squared();
    let mut trace = vec![initial_cost];
    let mut iterations = 0;
    let mut cost = initial_cost;
    let mut lambda_rel = 1e-8;
    for _ in 0..max_iterations {
        for (i, l) in cur.lines.iter_mut().enumerate() {
            if !l.fixed {
                l.line = l.line.clone().with_transported_info(&info_dirs[i]);
                info_dirs[i] = l.line.direction;
            }
        }
        let r = residual_vector(&cur);
        cost = r.norm_squared();
        let j = fd_jacobian(&cur, &lay, 1e-6);
        let h = j.transpose() * &j;
        let g = j.transpose() * &r;
        let max_diag = h.diagonal().max().max(f64::MIN_POSITIVE);
        let mut lam = lambda_rel * max_diag;
        let mut accepted = None;
        for _ in 0..40 {
            let mut damped = h.clone();
            for k in 0..damped.nrows() {
                damped[(k, k)] += lam;
            }
            let step = match damped.cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => {
                    lam *= 10.0;
                    continue;
                }
            };
            let trial = retracted(&cur, &lay, &step);
            let c = try_residual_vector(&trial)
                .map_or(f64::INFINITY, |rv| rv.norm_squared());
            if c < cost {
                accepted = Some((trial, c, lam));
                break;
            }
            lam *= 10.0;
        }
        let Some((next, c, lam_used)) = accepted else { break };
        lambda_rel = (lam_used / max_diag / 10.0).max(1e-12);
        let drop = cost - c;
        cur = next;
        cost = c;
        iterations += 1;
        trace.push(cost);
        if drop < 1e-14 * (1.0 + cost) {
            break;
        }
    }
    (
        cur,
        DenseReport { initial_cost, final_cost: cost, iterations, trace },
    )
}

