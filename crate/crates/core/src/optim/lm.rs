//! Damped Gauss-Newton core with points-first, lines-second block
//! elimination.
//!
//! Each outer iteration assembles the weighted normal equations once, then
//! searches over the damping parameter for a cost-decreasing step. Points
//! and lines are eliminated by block inversion (points couple to poses and
//! at most one line each; after point elimination lines stay mutually
//! decoupled), leaving a dense system over the pose tangents.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Matrix4, Vector3, Vector4};

use crate::geometry::{Pose, ProjectionModel, EPS_DEGENERATE};
use crate::line_cloud::{Line3D, VirtualObservation};
use crate::residuals::{
    e_pl_pre, e_pp_pre, e_vl, huber_cost, huber_weight, BlockKey, Observation2D, RobustConfig,
};

use super::pose_graph::{sim3_edge_jacobians, sim3_edge_residual};
use super::{LmConfig, OptimError, Problem, SolveReport, Term, Termination};

#[derive(Clone)]
struct State {
    poses: Vec<Pose>,
    points: Vec<Vector3<f64>>,
    lines: Vec<Line3D>,
}

impl State {
    fn of(problem: &Problem) -> Self {
        Self {
            poses: problem.poses.iter().map(|p| p.pose).collect(),
            points: problem.points.iter().map(|p| p.position).collect(),
            lines: problem.lines.iter().map(|l| l.line.clone()).collect(),
        }
    }
}

struct Layout {
    /// Per pose: tangent offset and dof (6 rigid, 7 similarity).
    pose_slot: Vec<Option<(usize, usize)>>,
    /// Per point/line: ordinal among the free ones.
    point_ord: Vec<Option<usize>>,
    line_ord: Vec<Option<usize>>,
    free_points: Vec<usize>,
    free_lines: Vec<usize>,
    n_pose_dof: usize,
}

impl Layout {
    fn build(problem: &Problem) -> Self {
        let mut pose_slot = vec![None; problem.poses.len()];
        let mut offset = 0;
        for (i, p) in problem.poses.iter().enumerate() {
            if !p.fixed {
                let dof = if p.sim3 { 7 } else { 6 };
                pose_slot[i] = Some((offset, dof));
                offset += dof;
            }
        }
        let mut point_ord = vec![None; problem.points.len()];
        let mut free_points = Vec::new();
        for (i, p) in problem.points.iter().enumerate() {
            if !p.fixed {
                point_ord[i] = Some(free_points.len());
                free_points.push(i);
            }
        }
        let mut line_ord = vec![None; problem.lines.len()];
        let mut free_lines = Vec::new();
        for (i, l) in problem.lines.iter().enumerate() {
            if !l.fixed {
                line_ord[i] = Some(free_lines.len());
                free_lines.push(i);
            }
        }
        Self { pose_slot, point_ord, line_ord, free_points, free_lines, n_pose_dof: offset }
    }

    fn total_dof(&self) -> usize {
        self.n_pose_dof + 3 * self.free_points.len() + 4 * self.free_lines.len()
    }
}

/// Symmetric square root of a 2x2 SPD matrix.
fn sqrt_spd2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let eig = m.symmetric_eigen();
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    eig.eigenvectors * Matrix2::from_diagonal(&d) * eig.eigenvectors.transpose()
}

fn compose_opt(pose: &Pose, pre: &Option<Pose>) -> Pose {
    match pre {
        Some(d) => d.compose(pose),
        None => *pose,
    }
}

/// Robust cost of one term at the given state, `None` when it cannot be
/// evaluated (projection failure, degenerate geometry).
fn term_cost(
    model: &ProjectionModel,
    st: &State,
    term: &Term,
    robust: &RobustConfig,
) -> Option<f64> {
    match term {
        Term::Reproj { pose, pre, point, pixel, info } => {
            let cam = compose_opt(&st.poses[*pose], pre);
            let y = cam.transform(&st.points[*point]);
            let px = model.project(&y).ok()?;
            let r = px - pixel;
            let s = (r.transpose() * info * r)[0];
            if !s.is_finite() {
                return None;
            }
            Some(huber_cost(s, robust.huber_reproj))
        }
        Term::ReprojLine { pose, pre, point, line, pixel, info } => {
            let cam = compose_opt(&st.poses[*pose], pre);
            let y = cam.transform(&st.points[*point]);
            let px = model.project(&y).ok()?;
            let r = px - pixel;
            let s_px = (r.transpose() * info * r)[0];
            let s_at = st.lines[*line].mahalanobis_sq(&st.points[*point]);
            if !(s_px.is_finite() && s_at.is_finite()) {
                return None;
            }
            Some(huber_cost(s_px, robust.huber_reproj) + huber_cost(s_at, robust.huber_attach))
        }
        Term::Virtual { pose, line, normal, weight } => {
            let l = &st.lines[*line];
            let p_c = st.poses[*pose].transform(&l.base);
            let d_c = st.poses[*pose].rotate(&l.direction);
            let c = p_c.cross(&d_c);
            let c_norm = c.norm();
            if c_norm < EPS_DEGENERATE {
                return None;
            }
            let r = 1.0 - (c / c_norm).dot(normal).abs();
            if !r.is_finite() {
                return None;
            }
            Some(weight * huber_cost(r * r, robust.huber_virtual))
        }
        Term::PointPrior { point, target, sqrt_info } => {
            Some((sqrt_info * (st.points[*point] - target)).norm_squared())
        }
        Term::Sim3Edge { pose_i, pose_j, measured } => {
            Some(sim3_edge_residual(&st.poses[*pose_i], &st.poses[*pose_j], measured).norm_squared())
        }
    }
}

fn total_cost(
    model: &ProjectionModel,
    st: &State,
    terms: &[Term],
    robust: &RobustConfig,
    mask: &[bool],
) -> f64 {
    let mut cost = 0.0;
    for (term, dropped) in terms.iter().zip(mask) {
        if *dropped {
            continue;
        }
        match term_cost(model, st, term, robust) {
            Some(c) => cost += c,
            None => return f64::INFINITY,
        }
    }
    cost
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Block {
    Pose(usize),
    Point(usize),
    Line(usize),
}

struct TermBlocks {
    /// Whitened residual: squared norm contributes the (kernel-linearized)
    /// cost, Jacobians are whitened consistently.
    residual: DVector<f64>,
    blocks: Vec<(Block, DMatrix<f64>)>,
}

fn eval_term_full(
    model: &ProjectionModel,
    st: &State,
    term: &Term,
    robust: &RobustConfig,
) -> Option<TermBlocks> {
    match term {
        Term::Reproj { pose, pre, point, pixel, info } => {
            let obs = Observation2D { keyframe_id: 0, landmark_id: 0, pixel: *pixel, info: *info };
            let res =
                e_pp_pre(&st.poses[*pose], pre.as_ref(), &st.points[*point], &obs, model, robust)
                    .ok()?;
            let wm = res.weight.sqrt() * sqrt_spd2(info);
            let wm = DMatrix::from_iterator(2, 2, wm.iter().copied());
            let residual = &wm * &res.residual;
            let blocks = res
                .jacobians
                .iter()
                .map(|(key, j)| {
                    let b = match key {
                        BlockKey::Pose => Block::Pose(*pose),
                        BlockKey::Landmark => Block::Point(*point),
                        BlockKey::Line => unreachable!("point term has no line block"),
                    };
                    (b, &wm * j)
                })
                .collect();
            Some(TermBlocks { residual, blocks })
        }
        Term::ReprojLine { pose, pre, point, line, pixel, info } => {
            let obs = Observation2D { keyframe_id: 0, landmark_id: 0, pixel: *pixel, info: *info };
            let l = &st.lines[*line];
            let res = e_pl_pre(
                &st.poses[*pose],
                pre.as_ref(),
                &st.points[*point],
                &obs,
                l,
                model,
                robust,
            )
            .ok()?;
            let r_px = res.residual.fixed_rows::<2>(0).into_owned();
            let s_px = (r_px.transpose() * info * r_px)[0];
            let s_at = l.mahalanobis_sq(&st.points[*point]);
            let w_px = huber_weight(s_px, robust.huber_reproj);
            let w_at = huber_weight(s_at, robust.huber_attach);
            let wm_px = w_px.sqrt() * sqrt_spd2(info);
            let wm_at = w_at.sqrt() * l.info_sqrt();

            let whiten = |m: &DMatrix<f64>| -> DMatrix<f64> {
                let mut out = DMatrix::zeros(5, m.ncols());
                let top = wm_px * m.rows(0, 2);
                let bottom = wm_at * m.rows(2, 3);
                out.rows_mut(0, 2).copy_from(&top);
                out.rows_mut(2, 3).copy_from(&bottom);
                out
            };
            let residual = {
                let as_mat = DMatrix::from_iterator(5, 1, res.residual.iter().copied());
                DVector::from_iterator(5, whiten(&as_mat).iter().copied())
            };
            let blocks = res
                .jacobians
                .iter()
                .map(|(key, j)| {
                    let b = match key {
                        BlockKey::Pose => Block::Pose(*pose),
                        BlockKey::Landmark => Block::Point(*point),
                        BlockKey::Line => Block::Line(*line),
                    };
                    (b, whiten(j))
                })
                .collect();
            Some(TermBlocks { residual, blocks })
        }
        Term::Virtual { pose, line, normal, weight } => {
            let vobs = VirtualObservation { keyframe: 0, line: 0, normal: *normal, weight: *weight };
            let res = e_vl(&st.poses[*pose], &st.lines[*line], &vobs, robust).ok()?;
            let scale = (res.weight * weight).sqrt();
            let residual = &res.residual * scale;
            let blocks = res
                .jacobians
                .iter()
                .map(|(key, j)| {
                    let b = match key {
                        BlockKey::Pose => Block::Pose(*pose),
                        BlockKey::Line => Block::Line(*line),
                        BlockKey::Landmark => unreachable!("virtual term has no point block"),
                    };
                    (b, j * scale)
                })
                .collect();
            Some(TermBlocks { residual, blocks })
        }
        Term::PointPrior { point, target, sqrt_info } => {
            let r = sqrt_info * (st.points[*point] - target);
            Some(TermBlocks {
                residual: DVector::from_column_slice(r.as_slice()),
                blocks: vec![(
                    Block::Point(*point),
                    DMatrix::from_iterator(3, 3, sqrt_info.iter().copied()),
                )],
            })
        }
        Term::Sim3Edge { pose_i, pose_j, measured } => {
            let r = sim3_edge_residual(&st.poses[*pose_i], &st.poses[*pose_j], measured);
            let (ji, jj) = sim3_edge_jacobians(&st.poses[*pose_i], &st.poses[*pose_j], measured);
            Some(TermBlocks {
                residual: DVector::from_column_slice(r.as_slice()),
                blocks: vec![
                    (Block::Pose(*pose_i), DMatrix::from_iterator(7, 7, ji.iter().copied())),
                    (Block::Pose(*pose_j), DMatrix::from_iterator(7, 7, jj.iter().copied())),
                ],
            })
        }
    }
}

struct PointSys {
    h: Matrix3<f64>,
    g: Vector3<f64>,
    /// Couplings `H_{x,p}` keyed by pose tangent offset.
    pose: BTreeMap<usize, DMatrix<f64>>,
    /// Coupling `H_{x,l}` to the point's line (free-line ordinal).
    line: Option<(usize, DMatrix<f64>)>,
}

struct LineSys {
    h: Matrix4<f64>,
    g: Vector4<f64>,
    /// Couplings `H_{l,p}` keyed by pose tangent offset.
    pose: BTreeMap<usize, DMatrix<f64>>,
}

struct Assembled {
    hpp: DMatrix<f64>,
    gp: DVector<f64>,
    points: Vec<PointSys>,
    lines: Vec<LineSys>,
    max_diag: f64,
    grad_inf: f64,
    zero_diag: bool,
}

fn add_block(h: &mut DMatrix<f64>, ro: usize, co: usize, m: &DMatrix<f64>) {
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            h[(ro + r, co + c)] += m[(r, c)];
        }
    }
}

fn assemble(
    model: &ProjectionModel,
    st: &State,
    terms: &[Term],
    robust: &RobustConfig,
    mask: &[bool],
    layout: &Layout,
) -> Assembled {
    let np = layout.n_pose_dof;
    let mut a = Assembled {
        hpp: DMatrix::zeros(np, np),
        gp: DVector::zeros(np),
        points: layout
            .free_points
            .iter()
            .map(|_| PointSys {
                h: Matrix3::zeros(),
                g: Vector3::zeros(),
                pose: BTreeMap::new(),
                line: None,
            })
            .collect(),
        lines: layout
            .free_lines
            .iter()
            .map(|_| LineSys { h: Matrix4::zeros(), g: Vector4::zeros(), pose: BTreeMap::new() })
            .collect(),
        max_diag: 0.0,
        grad_inf: 0.0,
        zero_diag: false,
    };

    for (term, dropped) in terms.iter().zip(mask) {
        if *dropped {
            continue;
        }
        // Terms that fail after an accepted (finite-cost) step are skipped
        // for this linearization only; the objective itself is unchanged.
        let Some(eval) = eval_term_full(model, st, term, robust) else {
            continue;
        };
        // Free blocks only, pose Jacobians sliced to the block's dof.
        let mut blocks: Vec<(Block, DMatrix<f64>)> = Vec::with_capacity(eval.blocks.len());
        for (b, j) in eval.blocks {
            match b {
                Block::Pose(i) => {
                    if let Some((_, dof)) = layout.pose_slot[i] {
                        blocks.push((b, j.columns(0, dof).into_owned()));
                    }
                }
                Block::Point(i) => {
                    if layout.point_ord[i].is_some() {
                        blocks.push((b, j));
                    }
                }
                Block::Line(i) => {
                    if layout.line_ord[i].is_some() {
                        blocks.push((b, j));
                    }
                }
            }
        }
        for i in 0..blocks.len() {
            let (bi, ji) = (&blocks[i].0, &blocks[i].1);
            let gi = ji.transpose() * &eval.residual;
            match bi {
                Block::Pose(p) => {
                    let (off, _) = layout.pose_slot[*p].unwrap();
                    for r in 0..gi.len() {
                        a.gp[off + r] += gi[r];
                    }
                }
                Block::Point(p) => {
                    let ord = layout.point_ord[*p].unwrap();
                    a.points[ord].g += Vector3::new(gi[0], gi[1], gi[2]);
                }
                Block::Line(l) => {
                    let ord = layout.line_ord[*l].unwrap();
                    a.lines[ord].g += Vector4::new(gi[0], gi[1], gi[2], gi[3]);
                }
            }
            for j in i..blocks.len() {
                let (bj, jj) = (&blocks[j].0, &blocks[j].1);
                let m = ji.transpose() * jj;
                match (bi, bj) {
                    (Block::Pose(pa), Block::Pose(pb)) => {
                        let (oa, _) = layout.pose_slot[*pa].unwrap();
                        let (ob, _) = layout.pose_slot[*pb].unwrap();
                        add_block(&mut a.hpp, oa, ob, &m);
                        if pa != pb {
                            add_block(&mut a.hpp, ob, oa, &m.transpose());
                        }
                    }
                    (Block::Pose(p), Block::Point(x)) => {
                        let (off, _) = layout.pose_slot[*p].unwrap();
                        let ord = layout.point_ord[*x].unwrap();
                        let entry = a.points[ord]
                            .pose
                            .entry(off)
                            .or_insert_with(|| DMatrix::zeros(3, m.nrows()));
                        *entry += m.transpose();
                    }
                    (Block::Point(x), Block::Point(y)) => {
                        debug_assert_eq!(x, y, "terms never couple two points");
                        let ord = layout.point_ord[*x].unwrap();
                        a.points[ord].h += Matrix3::from_iterator(m.iter().copied());
                    }
                    (Block::Point(x), Block::Line(l)) => {
                        let xo = layout.point_ord[*x].unwrap();
                        let lo = layout.line_ord[*l].unwrap();
                        match &mut a.points[xo].line {
                            Some((ord, c)) => {
                                debug_assert_eq!(*ord, lo, "a point attaches to one line");
                                *c += &m;
                            }
                            slot @ None => *slot = Some((lo, m)),
                        }
                    }
                    (Block::Pose(p), Block::Line(l)) => {
                        let (off, _) = layout.pose_slot[*p].unwrap();
                        let ord = layout.line_ord[*l].unwrap();
                        let entry = a.lines[ord]
                            .pose
                            .entry(off)
                            .or_insert_with(|| DMatrix::zeros(4, m.nrows()));
                        *entry += m.transpose();
                    }
                    (Block::Line(x), Block::Line(y)) => {
                        debug_assert_eq!(x, y, "terms never couple two lines");
                        let ord = layout.line_ord[*x].unwrap();
                        a.lines[ord].h += Matrix4::from_iterator(m.iter().copied());
                    }
                    // Evaluation emits blocks in pose, point, line order, so
                    // the mirrored pairings cannot occur.
                    other => unreachable!("unexpected block pairing {other:?}"),
                }
            }
        }
    }

    for i in 0..np {
        a.max_diag = a.max_diag.max(a.hpp[(i, i)]);
    }
    for p in &a.points {
        for i in 0..3 {
            a.max_diag = a.max_diag.max(p.h[(i, i)]);
        }
    }
    for l in &a.lines {
        for i in 0..4 {
            a.max_diag = a.max_diag.max(l.h[(i, i)]);
        }
    }
    // An exactly-zero diagonal means no term touches the direction at all
    // (a free block without observations, or rows scaled by a zero weight).
    // Merely tiny diagonals are left to the damping: the virtual-observation
    // residual is quadratic around consistency, so its curvature legitimately
    // collapses as a solve converges and must not be flagged.
    for i in 0..np {
        if !(a.hpp[(i, i)] > 0.0) {
            a.zero_diag = true;
        }
    }
    for p in &a.points {
        for i in 0..3 {
            if !(p.h[(i, i)] > 0.0) {
                a.zero_diag = true;
            }
        }
    }
    for l in &a.lines {
        for i in 0..4 {
            if !(l.h[(i, i)] > 0.0) {
                a.zero_diag = true;
            }
        }
    }
    a.grad_inf = a.gp.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    for p in &a.points {
        a.grad_inf = p.g.iter().fold(a.grad_inf, |acc, v| acc.max(v.abs()));
    }
    for l in &a.lines {
        a.grad_inf = l.g.iter().fold(a.grad_inf, |acc, v| acc.max(v.abs()));
    }
    a
}

struct Step {
    dp: DVector<f64>,
    dx: Vec<Vector3<f64>>,
    dl: Vec<Vector4<f64>>,
}

/// Solves the damped normal equations by two-level elimination. `None` when
/// a damped block fails to factor (the caller raises lambda).
fn try_step(a: &Assembled, layout: &Layout, lambda: f64) -> Option<Step> {
    let np = layout.n_pose_dof;
    let mut hpp = a.hpp.clone();
    for i in 0..np {
        hpp[(i, i)] += lambda;
    }
    let mut gp = a.gp.clone();

    let mut lh: Vec<Matrix4<f64>> =
        a.lines.iter().map(|l| l.h + lambda * Matrix4::identity()).collect();
    let mut lg: Vec<Vector4<f64>> = a.lines.iter().map(|l| l.g).collect();
    let mut lcoup: Vec<BTreeMap<usize, DMatrix<f64>>> =
        a.lines.iter().map(|l| l.pose.clone()).collect();

    // Eliminate points: fill pose-pose, pose-line, and line-diagonal blocks.
    let mut pw: Vec<Matrix3<f64>> = Vec::with_capacity(a.points.len());
    for psys in &a.points {
        let w = (psys.h + lambda * Matrix3::identity()).try_inverse()?;
        let wd = DMatrix::from_iterator(3, 3, w.iter().copied());
        let wg = w * psys.g;
        let entries: Vec<(usize, &DMatrix<f64>)> =
            psys.pose.iter().map(|(k, v)| (*k, v)).collect();
        for ai in 0..entries.len() {
            let (off_i, ci) = (entries[ai].0, entries[ai].1);
            let cit_w = ci.transpose() * &wd;
            for r in 0..ci.ncols() {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += cit_w[(r, k)] * psys.g[k];
                }
                gp[off_i + r] -= acc;
            }
            for &(off_j, cj) in entries[ai..].iter() {
                let m = &cit_w * cj;
                sub_into(&mut hpp, off_i, off_j, &m);
                if off_i != off_j {
                    sub_into(&mut hpp, off_j, off_i, &m.transpose());
                }
            }
            if let Some((lord, cl)) = &psys.line {
                // H_{l,p} -= H_{l,x} W H_{x,p}
                let fill = cl.transpose() * (&wd * ci);
                let entry = lcoup[*lord]
                    .entry(off_i)
                    .or_insert_with(|| DMatrix::zeros(4, ci.ncols()));
                *entry -= &fill;
            }
        }
        if let Some((lord, cl)) = &psys.line {
            let m = cl.transpose() * (&wd * cl);
            lh[*lord] -= Matrix4::from_iterator(m.iter().copied());
            for r in 0..4 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += cl[(k, r)] * wg[k];
                }
                lg[*lord][r] -= acc;
            }
        }
        pw.push(w);
    }

    // Eliminate lines into the pose system.
    let mut lw: Vec<Matrix4<f64>> = Vec::with_capacity(a.lines.len());
    for lord in 0..a.lines.len() {
        let w = lh[lord].try_inverse()?;
        let wd = DMatrix::from_iterator(4, 4, w.iter().copied());
        let entries: Vec<(usize, DMatrix<f64>)> =
            lcoup[lord].iter().map(|(k, v)| (*k, v.clone())).collect();
        for ai in 0..entries.len() {
            let (off_i, ci) = (&entries[ai].0, &entries[ai].1);
            let cit_w = ci.transpose() * &wd;
            for r in 0..ci.ncols() {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += cit_w[(r, k)] * lg[lord][k];
                }
                gp[off_i + r] -= acc;
            }
            for (off_j, cj) in entries[ai..].iter() {
                let m = &cit_w * cj;
                sub_into(&mut hpp, *off_i, *off_j, &m);
                if off_i != off_j {
                    sub_into(&mut hpp, *off_j, *off_i, &m.transpose());
                }
            }
        }
        lw.push(w);
    }

    let dp = if np > 0 {
        hpp.cholesky()?.solve(&(-&gp))
    } else {
        DVector::zeros(0)
    };

    // Back-substitute lines from the point-reduced system.
    let mut dl: Vec<Vector4<f64>> = Vec::with_capacity(a.lines.len());
    for (lord, _) in a.lines.iter().enumerate() {
        let mut rhs = lg[lord];
        for (off, c) in lcoup[lord].iter() {
            let seg = dp.rows(*off, c.ncols()).into_owned();
            let add = c * seg;
            rhs += Vector4::new(add[0], add[1], add[2], add[3]);
        }
        dl.push(-(lw[lord] * rhs));
    }

    // Back-substitute points from the original rows.
    let mut dx: Vec<Vector3<f64>> = Vec::with_capacity(a.points.len());
    for (pord, psys) in a.points.iter().enumerate() {
        let mut rhs = psys.g;
        for (off, c) in psys.pose.iter() {
            let seg = dp.rows(*off, c.ncols()).into_owned();
            let add = c * seg;
            rhs += Vector3::new(add[0], add[1], add[2]);
        }
        if let Some((lord, cl)) = &psys.line {
            let add = cl * dl[*lord];
            rhs += Vector3::new(add[0], add[1], add[2]);
        }
        dx.push(-(pw[pord] * rhs));
    }

    Some(Step { dp, dx, dl })
}

fn sub_into(h: &mut DMatrix<f64>, ro: usize, co: usize, m: &DMatrix<f64>) {
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            h[(ro + r, co + c)] -= m[(r, c)];
        }
    }
}

fn retract_state(st: &State, layout: &Layout, step: &Step) -> State {
    let mut out = st.clone();
    for (i, slot) in layout.pose_slot.iter().enumerate() {
        if let Some((off, dof)) = slot {
            let omega = Vector3::new(step.dp[*off], step.dp[off + 1], step.dp[off + 2]);
            let ups = Vector3::new(step.dp[off + 3], step.dp[off + 4], step.dp[off + 5]);
            let sigma = if *dof == 7 { step.dp[off + 6] } else { 0.0 };
            out.poses[i] = st.poses[i].retract(&omega, &ups, sigma);
        }
    }
    for (ord, &var) in layout.free_points.iter().enumerate() {
        out.points[var] = st.points[var] + step.dx[ord];
    }
    for (ord, &var) in layout.free_lines.iter().enumerate() {
        out.lines[var] = st.lines[var].retract(&step.dl[ord]);
    }
    out
}

/// Minimizes the problem in place. On return the problem's blocks hold the
/// final state; free lines carry information matrices transported to their
/// final directions.
pub fn lm_solve(problem: &mut Problem, config: &LmConfig) -> Result<SolveReport, OptimError> {
    if let Err(msg) = problem.validate() {
        panic!("invalid optimization problem: {msg}");
    }
    let layout = Layout::build(problem);
    let mut st = State::of(problem);

    // Terms that fail at the initial state are dropped for the whole solve
    // so the objective stays fixed while iterating.
    let mask: Vec<bool> = problem
        .terms
        .iter()
        .map(|t| eval_term_full(&problem.model, &st, t, &problem.robust).is_none())
        .collect();

    // Directions the free lines' information matrices currently refer to;
    // refreshed (rotated along) between outer iterations.
    let mut info_dir: Vec<Vector3<f64>> =
        layout.free_lines.iter().map(|&v| st.lines[v].direction).collect();

    let mut cost = total_cost(&problem.model, &st, &problem.terms, &problem.robust, &mask);
    let mut trace = vec![cost];
    let mut iterations = 0;
    let mut lambda: Option<f64> = None;
    let mut termination = Termination::MaxIterations;

    if layout.total_dof() == 0 {
        termination = Termination::GradientConverged;
    } else {
        for _ in 0..config.max_iterations {
            // Refresh line information to the current directions.
            let mut refreshed = false;
            for (ord, &var) in layout.free_lines.iter().enumerate() {
                if st.lines[var].direction != info_dir[ord] {
                    let line = st.lines[var].clone().with_transported_info(&info_dir[ord]);
                    info_dir[ord] = line.direction;
                    st.lines[var] = line;
                    refreshed = true;
                }
            }
            if refreshed {
                cost = total_cost(&problem.model, &st, &problem.terms, &problem.robust, &mask);
            }

            let a = assemble(&problem.model, &st, &problem.terms, &problem.robust, &mask, &layout);
            if a.zero_diag {
                return Err(OptimError::SingularSystem);
            }
            if a.grad_inf <= config.gradient_tolerance {
                termination = Termination::GradientConverged;
                break;
            }

            let mut lam = lambda
                .unwrap_or_else(|| config.initial_lambda_factor * a.max_diag.max(f64::MIN_POSITIVE));
            let mut rejects = 0;
            let mut accepted = false;
            loop {
                if let Some(step) = try_step(&a, &layout, lam) {
                    let trial = retract_state(&st, &layout, &step);
                    let trial_cost =
                        total_cost(&problem.model, &trial, &problem.terms, &problem.robust, &mask);
                    if trial_cost < cost {
                        let decrease = cost - trial_cost;
                        st = trial;
                        cost = trial_cost;
                        iterations += 1;
                        trace.push(cost);
                        lam = (lam / 10.0).max(1e-18);
                        lambda = Some(lam);
                        accepted = true;
                        if decrease < config.cost_tolerance {
                            termination = Termination::CostConverged;
                        }
                        break;
                    }
                }
                rejects += 1;
                lam *= 10.0;
                lambda = Some(lam);
                if rejects > config.max_rejects || !lam.is_finite() {
                    break;
                }
            }
            if !accepted {
                termination = Termination::NoProgress;
                break;
            }
            if termination == Termination::CostConverged {
                break;
            }
        }
    }

    // Final transport so committed lines carry information matrices
    // matching their final directions.
    for (ord, &var) in layout.free_lines.iter().enumerate() {
        if st.lines[var].direction != info_dir[ord] {
            let line = st.lines[var].clone().with_transported_info(&info_dir[ord]);
            info_dir[ord] = line.direction;
            st.lines[var] = line;
        }
    }

    for (i, pose) in st.poses.iter().enumerate() {
        problem.poses[i].pose = *pose;
    }
    for (i, point) in st.points.iter().enumerate() {
        problem.points[i].position = *point;
    }
    for (i, line) in st.lines.iter().enumerate() {
        problem.lines[i].line = line.clone();
    }

    Ok(SolveReport {
        initial_cost: trace[0],
        final_cost: cost,
        iterations,
        termination,
        cost_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::plane_normal;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn cam_model() -> ProjectionModel {
        ProjectionModel::Perspective {
            fx: 300.0,
            fy: 300.0,
            cx: 320.0,
            cy: 240.0,
            width: 640.0,
            height: 480.0,
        }
    }

    fn rand_world_point(rng: &mut ChaCha12Rng) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.0..1.0),
            rng.random_range(4.0..9.0),
        )
    }

    fn rand_unit(rng: &mut ChaCha12Rng) -> Vector3<f64> {
        let v: [f64; 3] = rng.sample(rand_distr::UnitSphere);
        Vector3::from(v)
    }

    fn ring_pose(i: usize) -> Pose {
        let angle = 0.08 * i as f64;
        let rotation = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), angle);
        Pose::from_rotation_center(rotation, Vector3::new(0.4 * i as f64, 0.1 * i as f64, 0.0))
    }

    fn nudge(pose: &Pose, rng: &mut ChaCha12Rng, rot: f64, trans: f64) -> Pose {
        let omega = rand_unit(rng) * rot;
        let ups = rand_unit(rng) * trans;
        pose.retract(&omega, &ups, 0.0)
    }

    /// Exact observations of fixed points from one free pose.
    fn pose_only_problem(pose: &Pose, n: usize, seed: u64) -> Problem {
        let model = cam_model();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut problem = Problem::new(model.clone());
        problem.robust = RobustConfig::without_kernels();
        let p = problem.add_pose(*pose, false, false);
        for _ in 0..n {
            let cam = Vector3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.0..1.0),
                rng.random_range(4.0..9.0),
            );
            let world = pose.inverse().transform(&cam);
            let pixel = model.project(&cam).unwrap();
            let x = problem.add_point(world, true);
            problem.terms.push(Term::Reproj {
                pose: p,
                pre: None,
                point: x,
                pixel,
                info: Matrix2::identity(),
            });
        }
        problem
    }

    #[test]
    fn zero_residual_problem_takes_no_steps() {
        let pose = ring_pose(1);
        let mut problem = pose_only_problem(&pose, 15, 7);
        let report = lm_solve(&mut problem, &LmConfig::default()).unwrap();
        assert_eq!(report.iterations, 0);
        assert_eq!(report.termination, Termination::GradientConverged);
        // Pose round-trips through its own inverse when generating the
        // fixture, so the cost floor is roundoff, not exactly zero.
        assert!(report.final_cost < 1e-18, "cost {}", report.final_cost);
        assert_eq!(problem.poses[0].pose, pose);
    }

    #[test]
    fn linear_problem_matches_normal_equations() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let model = cam_model();
        let mut problem = Problem::new(model);
        let mut expected = Vec::new();
        for _ in 0..3 {
            let x0 = rand_world_point(&mut rng);
            let var = problem.add_point(x0, false);
            let center = rand_world_point(&mut rng);
            let mut ata = Matrix3::<f64>::zeros();
            let mut atb = Vector3::<f64>::zeros();
            for _ in 0..4 {
                let target = center + rand_unit(&mut rng) * 0.02;
                let mut s = Matrix3::<f64>::zeros();
                for r in 0..3 {
                    for c in 0..3 {
                        s[(r, c)] = rng.random_range(-0.4..0.4);
                    }
                    s[(r, r)] += 1.5;
                }
                problem.terms.push(Term::PointPrior { point: var, target, sqrt_info: s });
                let a = s.transpose() * s;
                ata += a;
                atb += a * target;
            }
            expected.push(ata.try_inverse().unwrap() * atb);
        }
        // Run the quadratic problem essentially to the numerical floor so
        // the comparison against the closed form is tight.
        let config = LmConfig {
            cost_tolerance: 1e-18,
            gradient_tolerance: 1e-12,
            max_iterations: 100,
            ..LmConfig::default()
        };
        let report = lm_solve(&mut problem, &config).unwrap();
        assert!(report.monotone());
        // Cost-based termination resolves steps down to the f64 resolution
        // of the total cost, which bounds the achievable position accuracy.
        for (var, want) in expected.iter().enumerate() {
            let got = problem.points[var].position;
            assert!(
                (got - want).norm() < 5e-9,
                "point {var}: lm {got:?} vs closed form {want:?}"
            );
        }
    }

    /// A coherent miniature joint problem: client poses observing points and
    /// on-line points, server poses holding virtual observations of free
    /// lines.
    fn mixed_problem(seed: u64, perturb: bool) -> Problem {
        let model = cam_model();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut problem = Problem::new(model.clone());
        problem.robust = RobustConfig::without_kernels();

        let client_gt: Vec<Pose> = (0..3).map(ring_pose).collect();
        let server_gt: Vec<Pose> = (5..7).map(ring_pose).collect();
        let points_gt: Vec<Vector3<f64>> = (0..10).map(|_| rand_world_point(&mut rng)).collect();
        let anchors_gt: Vec<Vector3<f64>> = (0..5).map(|_| rand_world_point(&mut rng)).collect();
        let lines_gt: Vec<Line3D> = anchors_gt
            .iter()
            .map(|a| {
                let d = rand_unit(&mut rng);
                Line3D::from_point_direction(a, &d, &(Matrix3::identity() * 0.0025), vec![])
                    .unwrap()
            })
            .collect();

        let mut pose_vars = Vec::new();
        for (i, pose) in client_gt.iter().enumerate() {
            let init = if perturb && i > 0 { nudge(pose, &mut rng, 0.01, 0.03) } else { *pose };
            pose_vars.push(problem.add_pose(init, i == 0, false));
        }
        let mut server_vars = Vec::new();
        for pose in &server_gt {
            let init = if perturb { nudge(pose, &mut rng, 0.005, 0.02) } else { *pose };
            server_vars.push(problem.add_pose(init, false, false));
        }
        let mut point_vars = Vec::new();
        for x in &points_gt {
            let init = if perturb { x + rand_unit(&mut rng) * 0.05 } else { *x };
            point_vars.push(problem.add_point(init, false));
        }
        let mut line_vars = Vec::new();
        let mut xprime_vars = Vec::new();
        for (a, line) in anchors_gt.iter().zip(&lines_gt) {
            let line_init = if perturb {
                line.retract(&Vector4::new(
                    rng.random_range(-0.03..0.03),
                    rng.random_range(-0.03..0.03),
                    rng.random_range(-0.01..0.01),
                    rng.random_range(-0.01..0.01),
                ))
                .with_transported_info(&line.direction)
            } else {
                line.clone()
            };
            line_vars.push(problem.add_line(line_init, false));
            let init = if perturb { a + rand_unit(&mut rng) * 0.03 } else { *a };
            xprime_vars.push(problem.add_point(init, false));
        }

        for (pv, pose) in pose_vars.iter().zip(&client_gt) {
            for (xv, x) in point_vars.iter().zip(&points_gt) {
                let Ok(pixel) = model.project(&pose.transform(x)) else { continue };
                problem.terms.push(Term::Reproj {
                    pose: *pv,
                    pre: None,
                    point: *xv,
                    pixel,
                    info: Matrix2::identity(),
                });
            }
            for ((xv, lv), a) in xprime_vars.iter().zip(&line_vars).zip(&anchors_gt) {
                let Ok(pixel) = model.project(&pose.transform(a)) else { continue };
                problem.terms.push(Term::ReprojLine {
                    pose: *pv,
                    pre: None,
                    point: *xv,
                    line: *lv,
                    pixel,
                    info: Matrix2::identity(),
                });
            }
        }
        for (sv, pose) in server_vars.iter().zip(&server_gt) {
            for (lv, line) in line_vars.iter().zip(&lines_gt) {
                let Ok(normal) = plane_normal(pose, &line.base, &line.direction) else {
                    continue;
                };
                problem.terms.push(Term::Virtual {
                    pose: *sv,
                    line: *lv,
                    normal,
                    weight: 100.0,
                });
            }
        }
        problem
    }

    /// Central differences of the masked total cost against the assembled
    /// gradient (`cost = ||r~||^2`, so `d cost / d delta = 2 g`).
    #[test]
    fn assembled_gradient_matches_finite_differences() {
        let problem = mixed_problem(8, true);
        let layout = Layout::build(&problem);
        let st = State::of(&problem);
        let mask = vec![false; problem.terms.len()];
        let a = assemble(&problem.model, &st, &problem.terms, &problem.robust, &mask, &layout);

        let h = 1e-6;
        let mut checked = 0usize;
        let cost_at = |delta: &DVector<f64>| -> f64 {
            let step = Step {
                dp: delta.rows(0, layout.n_pose_dof).into_owned(),
                dx: layout
                    .free_points
                    .iter()
                    .enumerate()
                    .map(|(ord, _)| {
                        Vector3::new(
                            delta[layout.n_pose_dof + 3 * ord],
                            delta[layout.n_pose_dof + 3 * ord + 1],
                            delta[layout.n_pose_dof + 3 * ord + 2],
                        )
                    })
                    .collect(),
                dl: layout
                    .free_lines
                    .iter()
                    .enumerate()
                    .map(|(ord, _)| {
                        let base = layout.n_pose_dof + 3 * layout.free_points.len() + 4 * ord;
                        Vector4::new(delta[base], delta[base + 1], delta[base + 2], delta[base + 3])
                    })
                    .collect(),
            };
            let trial = retract_state(&st, &layout, &step);
            total_cost(&problem.model, &trial, &problem.terms, &problem.robust, &mask)
        };

        let total = layout.n_pose_dof + 3 * layout.free_points.len() + 4 * layout.free_lines.len();
        for dof in 0..total {
            let mut plus = DVector::zeros(total);
            plus[dof] = h;
            let mut minus = DVector::zeros(total);
            minus[dof] = -h;
            let fd = (cost_at(&plus) - cost_at(&minus)) / (2.0 * h);
            let g = if dof < layout.n_pose_dof {
                a.gp[dof]
            } else if dof < layout.n_pose_dof + 3 * layout.free_points.len() {
                let ord = (dof - layout.n_pose_dof) / 3;
                a.points[ord].g[(dof - layout.n_pose_dof) % 3]
            } else {
                let rel = dof - layout.n_pose_dof - 3 * layout.free_points.len();
                a.lines[rel / 4].g[rel % 4]
            };
            let scale = fd.abs().max((2.0 * g).abs()).max(1.0);
            assert!(
                (fd - 2.0 * g).abs() / scale < 1e-5,
                "dof {dof}: fd {fd} vs analytic {}",
                2.0 * g
            );
            checked += 1;
        }
        assert!(checked > 50, "fixture should exercise many dofs");
    }

    #[test]
    fn mixed_problem_converges_monotonically() {
        let mut problem = mixed_problem(3, true);
        let report = lm_solve(&mut problem, &LmConfig::default()).unwrap();
        assert!(report.monotone(), "trace must never increase: {:?}", report.cost_trace);
        assert!(report.final_cost < report.initial_cost);
        assert!(
            report.final_cost < 1e-10,
            "noiseless perturbation should be recovered: {}",
            report.final_cost
        );
        // Lines stay canonical after optimization.
        for l in &problem.lines {
            assert!((l.line.direction.norm() - 1.0).abs() < 1e-12);
            assert!(l.line.base.dot(&l.line.direction).abs() < 1e-9);
        }
    }

    #[test]
    fn repeated_solves_are_bit_identical() {
        let mut a = mixed_problem(4, true);
        let mut b = mixed_problem(4, true);
        let ra = lm_solve(&mut a, &LmConfig::default()).unwrap();
        let rb = lm_solve(&mut b, &LmConfig::default()).unwrap();
        assert_eq!(ra.cost_trace, rb.cost_trace);
        for (pa, pb) in a.poses.iter().zip(&b.poses) {
            assert_eq!(pa.pose, pb.pose);
        }
        for (xa, xb) in a.points.iter().zip(&b.points) {
            assert_eq!(xa.position, xb.position);
        }
        for (la, lb) in a.lines.iter().zip(&b.lines) {
            assert_eq!(la.line.base, lb.line.base);
            assert_eq!(la.line.direction, lb.line.direction);
            assert_eq!(la.line.info, lb.line.info);
        }
    }

    #[test]
    fn unconstrained_free_point_is_singular() {
        let pose = ring_pose(0);
        let mut problem = pose_only_problem(&pose, 12, 9);
        // Offset one pixel so the gradient is nonzero, then add a free point
        // nothing observes.
        if let Term::Reproj { pixel, .. } = &mut problem.terms[0] {
            pixel.x += 3.0;
        }
        problem.add_point(Vector3::new(0.0, 0.0, 5.0), false);
        let err = lm_solve(&mut problem, &LmConfig::default()).unwrap_err();
        assert_eq!(err, OptimError::SingularSystem);
    }

    #[test]
    fn damping_tolerates_the_null_scale_direction() {
        // A free similarity pose constrained only by reprojections: scale is
        // analytically unobservable (projection is scale-invariant), leaving
        // a column of pure cancellation noise. The damping has to keep the
        // solve stable and must not leak error into the observable dofs.
        let pose = ring_pose(2);
        let mut se3 = pose_only_problem(&pose, 12, 5);
        if let Term::Reproj { pixel, .. } = &mut se3.terms[0] {
            pixel.x += 3.0;
        }
        let mut sim3 = Problem::new(se3.model.clone());
        sim3.robust = se3.robust;
        sim3.poses = se3.poses.clone();
        sim3.poses[0].sim3 = true;
        sim3.points = se3.points.clone();
        sim3.terms = se3.terms.clone();

        let ra = lm_solve(&mut se3, &LmConfig::default()).unwrap();
        let rb = lm_solve(&mut sim3, &LmConfig::default()).unwrap();
        let pa = se3.poses[0].pose;
        let pb = sim3.poses[0].pose;
        assert!((rb.final_cost - ra.final_cost).abs() < 1e-6 * (1.0 + ra.final_cost));
        assert!((pb.scale - 1.0).abs() < 1e-3, "scale drifted to {}", pb.scale);
        assert!((pa.center() - pb.center()).norm() < 1e-3);
        assert!(pa.rotation_angle_to(&pb) < 1e-4);
    }

    #[test]
    fn huber_keeps_trace_monotone_under_outliers() {
        let pose = ring_pose(1);
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let mut problem = pose_only_problem(&pose, 40, 13);
        problem.robust = RobustConfig::default();
        for i in 0..6 {
            if let Term::Reproj { pixel, .. } = &mut problem.terms[i] {
                pixel.x += rng.random_range(60.0..140.0);
                pixel.y -= rng.random_range(30.0..90.0);
            }
        }
        // Start away from the optimum so the solver has to work.
        problem.poses[0].pose = nudge(&pose, &mut rng, 0.02, 0.08);
        let report = lm_solve(&mut problem, &LmConfig::default()).unwrap();
        assert!(report.monotone(), "{:?}", report.cost_trace);
        assert!(report.final_cost < report.initial_cost);
        let solved = problem.poses[0].pose;
        assert!(solved.rotation_angle_to(&pose).to_degrees() < 1.0);
        assert!((solved.center() - pose.center()).norm() < 0.05);
    }
}
