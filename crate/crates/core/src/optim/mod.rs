//! Nonlinear least-squares backend for the SLAM optimizers: a damped
//! Gauss-Newton (Levenberg-Marquardt) core with two-level block elimination,
//! the four bundle adjustment entry points, and Sim(3) pose graph
//! optimization.
//!
//! Parameter blocks are camera poses (6-dof rigid or 7-dof similarity),
//! 3D points, and 3D lines (4-dof tangent: in-plane base shift plus a
//! direction increment on the sphere). Each point couples to at most one
//! line (its attachment) and lines never couple to each other, so the
//! normal equations are eliminated points-first, lines-second, leaving a
//! dense reduced system over the poses only.

mod ba;
mod lm;
mod pose_graph;

pub use ba::{
    global_ba, local_ba, motion_only_ba, rigid_stereo_ba, BaConfig, MotionOnlyResult,
    RigidObservation, RigidStereoResult,
};
pub use lm::lm_solve;
pub use pose_graph::{pose_graph_optimize, PgoEdge};

use nalgebra::{Matrix2, Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{Pose, ProjectionModel};
use crate::line_cloud::Line3D;
use crate::residuals::RobustConfig;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OptimError {
    /// The reduced normal equations are rank-deficient: some free parameter
    /// has no constraining term (zero diagonal before damping), or the
    /// damped system still failed to factor.
    #[error("normal equations are singular: a free parameter is unconstrained")]
    SingularSystem,
    /// Final cost exceeded the initial cost. The step-acceptance rule makes
    /// this unreachable from inside the solver; wrappers keep the check as a
    /// guard against objective bugs.
    #[error("optimization increased the cost")]
    Diverged,
    #[error("not enough matches to constrain the pose ({found} < {needed})")]
    InsufficientMatches { found: usize, needed: usize },
    /// The observed landmark geometry leaves the pose unconstrained, e.g.
    /// line-only tracking where every matched line is parallel.
    #[error("landmark geometry does not constrain the pose")]
    DegenerateGeometry,
    #[error("pose graph is not connected to the fixed node")]
    DisconnectedGraph,
}

#[derive(Debug, Clone)]
pub struct LmConfig {
    pub max_iterations: usize,
    /// Absolute cost decrease below which an accepted step terminates.
    pub cost_tolerance: f64,
    /// Infinity norm of the gradient below which the state is optimal.
    pub gradient_tolerance: f64,
    /// Initial damping as a fraction of the largest Hessian diagonal.
    pub initial_lambda_factor: f64,
    /// Consecutive rejected steps before giving up on further progress.
    pub max_rejects: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            cost_tolerance: 1e-10,
            gradient_tolerance: 1e-10,
            initial_lambda_factor: 1e-4,
            max_rejects: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// An accepted step decreased the cost by less than the tolerance.
    CostConverged,
    /// The gradient dropped below the tolerance.
    GradientConverged,
    MaxIterations,
    /// Damping grew past its ceiling without finding a downhill step.
    NoProgress,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Number of accepted steps.
    pub iterations: usize,
    pub termination: Termination,
    /// Initial cost followed by the cost after each accepted step.
    pub cost_trace: Vec<f64>,
}

impl SolveReport {
    /// True when the trace never increases, the invariant every accepted
    /// LM step guarantees.
    pub fn monotone(&self) -> bool {
        self.cost_trace.windows(2).all(|w| w[1] <= w[0])
    }
}

#[derive(Debug, Clone)]
pub struct PoseVar {
    pub pose: Pose,
    pub fixed: bool,
    /// Free scale: 7-dof similarity instead of a 6-dof rigid pose.
    pub sim3: bool,
}

#[derive(Debug, Clone)]
pub struct PointVar {
    pub position: Vector3<f64>,
    pub fixed: bool,
}

#[derive(Debug, Clone)]
pub struct LineVar {
    pub line: Line3D,
    pub fixed: bool,
}

/// One residual term. Indices reference the problem's block vectors.
#[derive(Debug, Clone)]
pub enum Term {
    /// Point reprojection: `pi(pre * pose, point) - pixel` under the pixel
    /// information matrix. `pre` is the frozen relative pose of a rigid
    /// group member (None outside rigid-stereo BA).
    Reproj {
        pose: usize,
        pre: Option<Pose>,
        point: usize,
        pixel: Vector2<f64>,
        info: Matrix2<f64>,
    },
    /// Line-attached reprojection: reprojection of the reconstructed point
    /// plus its Mahalanobis attachment to the line.
    ReprojLine {
        pose: usize,
        pre: Option<Pose>,
        point: usize,
        line: usize,
        pixel: Vector2<f64>,
        info: Matrix2<f64>,
    },
    /// Virtual observation: the plane normal through the posed line must
    /// match the recorded normal.
    Virtual {
        pose: usize,
        line: usize,
        normal: Vector3<f64>,
        weight: f64,
    },
    /// Anchor a point to a target position. Linear; used to express plain
    /// least-squares problems and priors.
    PointPrior {
        point: usize,
        target: Vector3<f64>,
        sqrt_info: nalgebra::Matrix3<f64>,
    },
    /// Relative-pose constraint between two similarity poses:
    /// `log(measured^-1 * P_i^-1 * P_j)`.
    Sim3Edge {
        pose_i: usize,
        pose_j: usize,
        measured: Pose,
    },
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub model: ProjectionModel,
    pub poses: Vec<PoseVar>,
    pub points: Vec<PointVar>,
    pub lines: Vec<LineVar>,
    pub terms: Vec<Term>,
    pub robust: RobustConfig,
}

impl Problem {
    pub fn new(model: ProjectionModel) -> Self {
        Self {
            model,
            poses: Vec::new(),
            points: Vec::new(),
            lines: Vec::new(),
            terms: Vec::new(),
            robust: RobustConfig::default(),
        }
    }

    pub fn add_pose(&mut self, pose: Pose, fixed: bool, sim3: bool) -> usize {
        self.poses.push(PoseVar { pose, fixed, sim3 });
        self.poses.len() - 1
    }

    pub fn add_point(&mut self, position: Vector3<f64>, fixed: bool) -> usize {
        self.points.push(PointVar { position, fixed });
        self.points.len() - 1
    }

    pub fn add_line(&mut self, line: Line3D, fixed: bool) -> usize {
        self.lines.push(LineVar { line, fixed });
        self.lines.len() - 1
    }

    /// Checks block references and that at least one block is free.
    pub fn validate(&self) -> Result<(), String> {
        let any_free = self.poses.iter().any(|p| !p.fixed)
            || self.points.iter().any(|p| !p.fixed)
            || self.lines.iter().any(|l| !l.fixed);
        if !any_free {
            return Err("no free parameter block".into());
        }
        for (i, term) in self.terms.iter().enumerate() {
            let (pose_refs, point_ref, line_ref): (Vec<usize>, Option<usize>, Option<usize>) =
                match term {
                    Term::Reproj { pose, point, .. } => (vec![*pose], Some(*point), None),
                    Term::ReprojLine { pose, point, line, .. } => {
                        (vec![*pose], Some(*point), Some(*line))
                    }
                    Term::Virtual { pose, line, .. } => (vec![*pose], None, Some(*line)),
                    Term::PointPrior { point, .. } => (vec![], Some(*point), None),
                    Term::Sim3Edge { pose_i, pose_j, .. } => (vec![*pose_i, *pose_j], None, None),
                };
            for p in pose_refs {
                if p >= self.poses.len() {
                    return Err(format!("term {i}: pose index {p} out of range"));
                }
            }
            if let Some(p) = point_ref {
                if p >= self.points.len() {
                    return Err(format!("term {i}: point index {p} out of range"));
                }
            }
            if let Some(l) = line_ref {
                if l >= self.lines.len() {
                    return Err(format!("term {i}: line index {l} out of range"));
                }
            }
        }
        Ok(())
    }
}
