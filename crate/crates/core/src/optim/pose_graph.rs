//! Sim(3) pose graph optimization over relative-pose constraints.
//!
//! Each edge stores the measured relative pose `P_i^-1 * P_j`; the residual
//! is the 7-dof logarithm of the discrepancy, and all poses optimize as
//! similarities so accumulated monocular scale drift can be absorbed at
//! loop closures. Edge Jacobians come from central differences over the
//! pose tangents.

use std::collections::VecDeque;

use nalgebra::{SMatrix, SVector, Vector3};

use crate::geometry::{Pose, ProjectionModel};

use super::{lm_solve, LmConfig, OptimError, Problem, SolveReport, Term};

/// Relative-pose constraint: at consistency `measured = P_from^-1 * P_to`.
#[derive(Debug, Clone)]
pub struct PgoEdge {
    pub from: usize,
    pub to: usize,
    pub measured: Pose,
}

impl PgoEdge {
    /// Edge consistent with a pair of absolute poses.
    pub fn between(from: usize, to: usize, pose_from: &Pose, pose_to: &Pose) -> Self {
        Self { from, to, measured: pose_from.inverse().compose(pose_to) }
    }
}

/// `log(measured^-1 * P_i^-1 * P_j)` as `[omega, upsilon, log scale]`;
/// zero exactly when the pair satisfies the edge.
pub(super) fn sim3_edge_residual(pi: &Pose, pj: &Pose, measured: &Pose) -> SVector<f64, 7> {
    let err = measured.inverse().compose(&pi.inverse().compose(pj));
    let omega = err.rotation.scaled_axis();
    SVector::<f64, 7>::from_column_slice(&[
        omega.x,
        omega.y,
        omega.z,
        err.translation.x,
        err.translation.y,
        err.translation.z,
        err.scale.ln(),
    ])
}

/// Central-difference Jacobians of [`sim3_edge_residual`] with respect to
/// the tangents of both poses.
pub(super) fn sim3_edge_jacobians(
    pi: &Pose,
    pj: &Pose,
    measured: &Pose,
) -> (SMatrix<f64, 7, 7>, SMatrix<f64, 7, 7>) {
    const H: f64 = 1e-6;
    let mut ji = SMatrix::<f64, 7, 7>::zeros();
    let mut jj = SMatrix::<f64, 7, 7>::zeros();
    for k in 0..7 {
        let mut tangent = [0.0; 7];
        tangent[k] = H;
        let up = retract_tangent(pi, &tangent);
        tangent[k] = -H;
        let down = retract_tangent(pi, &tangent);
        let col = (sim3_edge_residual(&up, pj, measured)
            - sim3_edge_residual(&down, pj, measured))
            / (2.0 * H);
        ji.set_column(k, &col);

        tangent[k] = H;
        let up = retract_tangent(pj, &tangent);
        tangent[k] = -H;
        let down = retract_tangent(pj, &tangent);
        let col = (sim3_edge_residual(pi, &up, measured)
            - sim3_edge_residual(pi, &down, measured))
            / (2.0 * H);
        jj.set_column(k, &col);
    }
    (ji, jj)
}

fn retract_tangent(pose: &Pose, t: &[f64; 7]) -> Pose {
    pose.retract(
        &Vector3::new(t[0], t[1], t[2]),
        &Vector3::new(t[3], t[4], t[5]),
        t[6],
    )
}

/// Optimizes the keyframe poses against odometry and loop-closure edges,
/// holding `fixed` in place as the gauge anchor.
pub fn pose_graph_optimize(
    poses: &[Pose],
    fixed: usize,
    edges: &[PgoEdge],
    config: &LmConfig,
) -> Result<(Vec<Pose>, SolveReport), OptimError> {
    assert!(fixed < poses.len(), "fixed node out of range");
    for e in edges {
        assert!(e.from < poses.len() && e.to < poses.len(), "edge references missing node");
    }

    // Every node must reach the anchor through some chain of constraints.
    let mut adjacency = vec![Vec::new(); poses.len()];
    for e in edges {
        adjacency[e.from].push(e.to);
        adjacency[e.to].push(e.from);
    }
    let mut seen = vec![false; poses.len()];
    let mut queue = VecDeque::from([fixed]);
    seen[fixed] = true;
    while let Some(node) = queue.pop_front() {
        for &next in &adjacency[node] {
            if !seen[next] {
                seen[next] = true;
                queue.push_back(next);
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(OptimError::DisconnectedGraph);
    }

    // No projection terms appear in a pose graph; the model is unused.
    let mut problem = Problem::new(ProjectionModel::Equirectangular { width: 2.0, height: 1.0 });
    for (i, pose) in poses.iter().enumerate() {
        problem.add_pose(*pose, i == fixed, true);
    }
    for e in edges {
        problem.terms.push(Term::Sim3Edge { pose_i: e.from, pose_j: e.to, measured: e.measured });
    }
    let report = lm_solve(&mut problem, config)?;
    Ok((problem.poses.into_iter().map(|p| p.pose).collect(), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Termination;
    use nalgebra::UnitQuaternion;

    fn circle_pose(i: usize, n: usize) -> Pose {
        let angle = i as f64 / n as f64 * std::f64::consts::TAU;
        let rotation = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), angle);
        let center = Vector3::new(5.0 * angle.cos(), 0.2 * (3.0 * angle).sin(), 5.0 * angle.sin());
        Pose::from_rotation_center(rotation, center)
    }

    #[test]
    fn consistent_graph_is_a_fixed_point() {
        let n = 12;
        let poses: Vec<Pose> = (0..n).map(|i| circle_pose(i, n)).collect();
        let mut edges: Vec<PgoEdge> = (0..n - 1)
            .map(|i| PgoEdge::between(i, i + 1, &poses[i], &poses[i + 1]))
            .collect();
        edges.push(PgoEdge::between(n - 1, 0, &poses[n - 1], &poses[0]));
        edges.push(PgoEdge::between(2, 7, &poses[2], &poses[7]));

        let (out, report) = pose_graph_optimize(&poses, 0, &edges, &LmConfig::default()).unwrap();
        assert_eq!(report.iterations, 0);
        assert_eq!(report.termination, Termination::GradientConverged);
        for (a, b) in out.iter().zip(&poses) {
            assert!(a.rotation_angle_to(b) < 1e-9);
            assert!((a.translation - b.translation).norm() < 1e-9);
            assert!((a.scale - b.scale).abs() < 1e-9);
        }
    }

    #[test]
    fn loop_closure_repairs_scale_drift() {
        let n = 100;
        let truth: Vec<Pose> = (0..n).map(|i| circle_pose(i, n)).collect();
        // Odometry reports each relative pose with a small scale bias that
        // compounds to 5% over the loop.
        let rho = 1.05_f64.powf(1.0 / (n as f64 - 1.0));
        let bias = Pose::new(UnitQuaternion::identity(), Vector3::zeros(), rho);
        let mut initial = vec![truth[0]];
        let mut edges = Vec::new();
        for i in 0..n - 1 {
            let measured = truth[i].inverse().compose(&truth[i + 1]).compose(&bias);
            initial.push(initial[i].compose(&measured));
            edges.push(PgoEdge { from: i, to: i + 1, measured });
        }
        let drift = (initial[n - 1].scale - truth[n - 1].scale).abs();
        assert!(drift > 0.045, "drift fixture should accumulate ~5%: {drift}");
        edges.push(PgoEdge::between(n - 1, 0, &truth[n - 1], &truth[0]));

        let (out, report) =
            pose_graph_optimize(&initial, 0, &edges, &LmConfig::default()).unwrap();
        assert!(report.monotone());
        let scale_err = (out[n - 1].scale / truth[n - 1].scale - 1.0).abs();
        assert!(scale_err < 0.005, "endpoint scale error {scale_err}");
    }

    #[test]
    fn tree_graph_converges_to_the_odometry_chain() {
        let n = 30;
        let truth: Vec<Pose> = (0..n).map(|i| circle_pose(i, n)).collect();
        let rho = 1.02_f64.powf(1.0 / (n as f64 - 1.0));
        let bias = Pose::new(UnitQuaternion::identity(), Vector3::zeros(), rho);
        let mut chained = vec![truth[0]];
        let mut edges = Vec::new();
        for i in 0..n - 1 {
            let measured = truth[i].inverse().compose(&truth[i + 1]).compose(&bias);
            chained.push(chained[i].compose(&measured));
            edges.push(PgoEdge { from: i, to: i + 1, measured });
        }

        // Start from the unbiased poses: without a loop edge the optimum is
        // exactly the chained odometry.
        let (out, report) = pose_graph_optimize(&truth, 0, &edges, &LmConfig::default()).unwrap();
        assert!(report.final_cost < 1e-14, "tree graph cost {}", report.final_cost);
        for (a, b) in out.iter().zip(&chained) {
            assert!(a.rotation_angle_to(b) < 1e-6);
            assert!((a.translation - b.translation).norm() < 1e-6);
            assert!((a.scale - b.scale).abs() < 1e-6);
        }
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let poses = vec![Pose::identity(); 4];
        let edges = vec![PgoEdge::between(0, 1, &poses[0], &poses[1])];
        let err = pose_graph_optimize(&poses, 0, &edges, &LmConfig::default()).unwrap_err();
        assert_eq!(err, OptimError::DisconnectedGraph);
    }
}
