//! Visual SLAM against privacy-preserving 3D line-cloud maps.
//!
//! A conventional sparse point map reveals the scene it was built from: the
//! points themselves are a coarse 3D scan. This crate implements the
//! line-cloud alternative: every map point is replaced by a 3D line with a
//! random direction passing through it, with the base point canonicalized so
//! the original point's position along the line is not recoverable. Cameras
//! can still relocalize and track against such a map because each observation
//! constrains the scene point to lie near its line, and bundle adjustment
//! over poses, reconstructed points, and the lines themselves keeps the map
//! consistent.
//!
//! Module map:
//! - [`geometry`]: Sim(3)/SE(3) poses and the three camera projection models.
//! - [`line_cloud`]: point-to-line lifting, line information matrices,
//!   virtual observations, and the serialized map schema.
//! - [`residuals`]: the three error terms (point reprojection, line-attached
//!   reprojection, virtual line observation) with analytic Jacobians and a
//!   finite-difference checker.
//! - [`registration`]: closed-form and alternating Sim(3) solvers plus a
//!   seeded RANSAC wrapper for relocalization and loop detection.
//! - [`matching`]: line discretization, windowed 2D-3D matching, and point
//!   reconstruction on lines.
//! - [`optim`]: the sparse Levenberg-Marquardt core, the four bundle
//!   adjustment variants, and Sim(3) pose graph optimization.
//! - [`map`]: the in-memory world map shared by tracking and optimization.
//! - [`sim_world`]: a deterministic synthetic world generator used by the
//!   test suites and the CLI.
//! - [`slam`]: the sequential tracking / mapping / loop closing pipeline.
//! - [`eval`]: absolute pose error metrics and report emission.

pub mod eval;
pub mod geometry;
pub mod line_cloud;
pub mod map;
pub mod matching;
pub mod optim;
pub mod registration;
pub mod residuals;
pub mod sim_world;
pub mod slam;

pub use geometry::{Pose, ProjectionModel};
pub use line_cloud::{Line3D, LineCloudMap, VirtualObservation};

/// Deterministically derives a sub-seed so that independent random streams
/// (per frame, per stage) never share state. SplitMix64 finalizer.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
