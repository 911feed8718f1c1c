//! Rigid and similarity transforms plus camera projection models.

mod camera;
mod pose;

pub use camera::{GeometryError, ProjectionModel};
pub use pose::{plane_normal, Pose};

/// Degeneracy threshold in world units. Norms below this are treated as zero
/// when normalizing directions or testing for coincident geometry.
pub const EPS_DEGENERATE: f64 = 1e-8;
