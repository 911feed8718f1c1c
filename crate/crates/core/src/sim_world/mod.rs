//! Deterministic synthetic world: scene generation, trajectory sampling,
//! observation rendering, and prebuilt-map construction with controlled
//! drift.
//!
//! Everything here is seeded. The same `(config, seed)` pair reproduces the
//! same scene, the same noisy pixels, and the same prebuilt maps bit for bit,
//! which is what makes end-to-end regression runs comparable across machines.

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::geometry::{Pose, ProjectionModel};
use crate::matching::{Feature, FrameObservations};

pub mod dataset;
mod map_build;

pub use crate::derive_seed;
pub use map_build::{build_prebuilt_map, lift_client_map, MapBuildConfig};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("tracking lost at keyframe {keyframe}: {matched} matches, need {needed}")]
    TrackingLost {
        keyframe: usize,
        matched: usize,
        needed: usize,
    },
}

// ---------------------------------------------------------------------------
// Scene generation
// ---------------------------------------------------------------------------

/// A region that landmarks are sampled from, uniformly, `count` at a time.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeSpec {
    /// Planar rectangular patch `origin + a*edge_u + b*edge_v`, `a,b ∈ [0,1]`.
    Wall {
        origin: Vector3<f64>,
        edge_u: Vector3<f64>,
        edge_v: Vector3<f64>,
        count: usize,
    },
    /// Axis-aligned box.
    Box {
        min: Vector3<f64>,
        max: Vector3<f64>,
        count: usize,
    },
    /// Ball of radius `radius` around `center`.
    Scatter {
        center: Vector3<f64>,
        radius: f64,
        count: usize,
    },
}

impl VolumeSpec {
    pub fn count(&self) -> usize {
        match *self {
            VolumeSpec::Wall { count, .. }
            | VolumeSpec::Box { count, .. }
            | VolumeSpec::Scatter { count, .. } => count,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub volumes: Vec<VolumeSpec>,
    pub descriptor_dim: usize,
    /// Minimum pairwise euclidean distance between landmark descriptors.
    /// Keeps synthetic descriptors unambiguous under the matching gates.
    pub descriptor_separation: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            volumes: Vec::new(),
            descriptor_dim: 16,
            descriptor_separation: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneLandmark {
    pub position: Vector3<f64>,
    /// Unit-norm descriptor.
    pub descriptor: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub landmarks: Vec<SceneLandmark>,
    pub seed: u64,
}

fn random_unit_descriptor<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Samples landmark positions from the configured volumes and draws a
/// unit-norm descriptor per landmark, rejecting draws that land closer than
/// the separation floor to any accepted descriptor.
pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<Scene, SimError> {
    let total: usize = config.volumes.iter().map(VolumeSpec::count).sum();
    if total == 0 {
        return Err(SimError::Config("scene has zero landmarks".into()));
    }
    if config.descriptor_dim < 2 {
        return Err(SimError::Config("descriptor_dim must be at least 2".into()));
    }
    if !(0.0..1.4).contains(&config.descriptor_separation) {
        return Err(SimError::Config(
            "descriptor_separation must lie in [0, 1.4)".into(),
        ));
    }
    for v in &config.volumes {
        match v {
            VolumeSpec::Wall { edge_u, edge_v, .. } => {
                if edge_u.cross(edge_v).norm() < 1e-9 {
                    return Err(SimError::Config("degenerate wall edges".into()));
                }
            }
            VolumeSpec::Box { min, max, .. } => {
                if !(min.x < max.x && min.y < max.y && min.z < max.z) {
                    return Err(SimError::Config("box min must be below max".into()));
                }
            }
            VolumeSpec::Scatter { radius, .. } => {
                if *radius <= 0.0 {
                    return Err(SimError::Config("scatter radius must be positive".into()));
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(total);
    for v in &config.volumes {
        match *v {
            VolumeSpec::Wall {
                origin,
                edge_u,
                edge_v,
                count,
            } => {
                for _ in 0..count {
                    let a: f64 = rng.random();
                    let b: f64 = rng.random();
                    positions.push(origin + edge_u * a + edge_v * b);
                }
            }
            VolumeSpec::Box { min, max, count } => {
                for _ in 0..count {
                    let p = Vector3::new(
                        rng.random_range(min.x..max.x),
                        rng.random_range(min.y..max.y),
                        rng.random_range(min.z..max.z),
                    );
                    positions.push(p);
                }
            }
            VolumeSpec::Scatter {
                center,
                radius,
                count,
            } => {
                let mut placed = 0;
                while placed < count {
                    let p = Vector3::new(
                        rng.random_range(-radius..radius),
                        rng.random_range(-radius..radius),
                        rng.random_range(-radius..radius),
                    );
                    if p.norm() <= radius {
                        positions.push(center + p);
                        placed += 1;
                    }
                }
            }
        }
    }

    // Rejection sampling keeps descriptors pairwise separated; on random
    // unit vectors in 16 dims collisions under a 0.6 floor are rare, so the
    // retry budget is generous without being unbounded.
    let mut descriptors: Vec<Vec<f64>> = Vec::with_capacity(total);
    let max_attempts = 200usize.saturating_mul(total).max(10_000);
    let mut attempts = 0;
    while descriptors.len() < total {
        attempts += 1;
        if attempts > max_attempts {
            return Err(SimError::Config(format!(
                "could not draw {} descriptors with separation {} in dim {}",
                total, config.descriptor_separation, config.descriptor_dim
            )));
        }
        let cand = random_unit_descriptor(config.descriptor_dim, &mut rng);
        let floor_sq = config.descriptor_separation * config.descriptor_separation;
        let ok = descriptors.iter().all(|d| {
            let dist_sq: f64 = d.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
            dist_sq > floor_sq
        });
        if ok {
            descriptors.push(cand);
        }
    }

    let landmarks = positions
        .into_iter()
        .zip(descriptors)
        .map(|(position, descriptor)| SceneLandmark {
            position,
            descriptor,
        })
        .collect();
    Ok(Scene { landmarks, seed })
}

// ---------------------------------------------------------------------------
// Trajectory
// ---------------------------------------------------------------------------

/// Where the camera looks while travelling.
#[derive(Debug, Clone, PartialEq)]
pub enum LookPolicy {
    /// Optical axis follows the (smoothed) travel direction.
    Forward,
    /// Optical axis points at a fixed world target.
    At(Vector3<f64>),
}

/// Piecewise-linear path through `waypoints`, parametrized by arclength.
/// Keyframes are dropped every `keyframe_spacing` meters; regular frames can
/// be sampled at any finer spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub waypoints: Vec<Vector3<f64>>,
    /// Closes the polyline back to the first waypoint.
    pub closed_loop: bool,
    pub keyframe_spacing: f64,
    pub look: LookPolicy,
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.waypoints.len() < 2 {
            return Err(SimError::Config("trajectory needs >= 2 waypoints".into()));
        }
        if !(self.keyframe_spacing > 0.0) {
            return Err(SimError::Config("keyframe_spacing must be positive".into()));
        }
        for w in self.segments() {
            if (w.1 - w.0).norm() < 1e-9 {
                return Err(SimError::Config("zero-length trajectory segment".into()));
            }
        }
        Ok(())
    }

    fn segments(&self) -> Vec<(Vector3<f64>, Vector3<f64>)> {
        let mut segs: Vec<_> = self.waypoints.windows(2).map(|w| (w[0], w[1])).collect();
        if self.closed_loop {
            segs.push((*self.waypoints.last().unwrap(), self.waypoints[0]));
        }
        segs
    }

    pub fn total_length(&self) -> f64 {
        self.segments().iter().map(|(a, b)| (b - a).norm()).sum()
    }

    /// Position at arclength `s`. Open paths clamp to the endpoints; closed
    /// loops wrap around.
    pub fn point_at(&self, s: f64) -> Vector3<f64> {
        let length = self.total_length();
        let mut s = if self.closed_loop {
            s.rem_euclid(length)
        } else {
            s.clamp(0.0, length)
        };
        for (a, b) in self.segments() {
            let seg = (b - a).norm();
            if s <= seg {
                return a + (b - a) * (s / seg);
            }
            s -= seg;
        }
        *self.waypoints.last().unwrap()
    }

    /// World-to-camera pose at arclength `s`. The travel direction is taken
    /// over a short chord so orientation stays continuous through waypoint
    /// corners instead of jumping with the segment tangent.
    pub fn pose_at(&self, s: f64) -> Pose {
        let center = self.point_at(s);
        let h = (0.5 * self.keyframe_spacing).min(0.5).max(1e-4);
        let dir = match self.look {
            LookPolicy::Forward => {
                let d = self.point_at(s + h) - self.point_at(s - h);
                if d.norm() < 1e-9 {
                    // Stationary chord (clamped at an endpoint of an open
                    // path): fall back to the nearest segment direction.
                    let (a, b) = if s <= 0.5 * self.total_length() {
                        self.segments()[0]
                    } else {
                        *self.segments().last().unwrap()
                    };
                    b - a
                } else {
                    d
                }
            }
            LookPolicy::At(target) => {
                let d = target - center;
                if d.norm() < 1e-9 {
                    Vector3::z()
                } else {
                    d
                }
            }
        };
        let up = if dir.normalize().cross(&Vector3::y()).norm() < 1e-6 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        // face_towards points the camera-frame +z axis along `dir`; its
        // inverse is the world-to-camera rotation.
        let cam_to_world = UnitQuaternion::face_towards(&dir, &up);
        Pose::from_rotation_center(cam_to_world.inverse(), center)
    }

    /// Arclength stations of the keyframes: one every `keyframe_spacing`
    /// starting at 0. Closed loops stop short of duplicating the start.
    pub fn keyframe_stations(&self) -> Vec<f64> {
        let length = self.total_length();
        let mut out = Vec::new();
        let mut s = 0.0;
        let end = if self.closed_loop {
            length - 0.5 * self.keyframe_spacing
        } else {
            length
        };
        while s <= end + 1e-9 {
            out.push(s.min(length));
            s += self.keyframe_spacing;
        }
        out
    }

    pub fn keyframe_poses(&self) -> Vec<Pose> {
        self.keyframe_stations()
            .iter()
            .map(|&s| self.pose_at(s))
            .collect()
    }

    /// Poses sampled every `spacing` meters over the whole path (including
    /// both endpoints for open paths).
    pub fn frame_poses(&self, spacing: f64) -> Vec<Pose> {
        let length = self.total_length();
        let mut out = Vec::new();
        let mut s = 0.0;
        let end = if self.closed_loop {
            length - 0.5 * spacing
        } else {
            length
        };
        while s <= end + 1e-9 {
            out.push(self.pose_at(s.min(length)));
            s += spacing;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Observation rendering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Std-dev of isotropic Gaussian pixel noise.
    pub pixel_sigma: f64,
    /// Probability that a feature's descriptor is replaced with a fresh
    /// random unit vector (a wrong-match generator).
    pub descriptor_corruption: f64,
    /// Probability that a visible landmark is simply not detected.
    pub dropout: f64,
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self {
            pixel_sigma: 0.0,
            descriptor_corruption: 0.0,
            dropout: 0.0,
        }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            pixel_sigma: 1.0,
            descriptor_corruption: 0.01,
            dropout: 0.0,
        }
    }
}

/// Ground-truth association for one rendered feature. This table exists for
/// evaluation and test oracles only; the SLAM pipeline never sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TruthMatch {
    /// Index into `FrameObservations::features`.
    pub feature: usize,
    /// Index into `Scene::landmarks`.
    pub landmark: usize,
}

/// Projects every visible scene landmark through `pose` and `model`, applies
/// pixel noise, descriptor corruption, and dropout, and returns the frame
/// together with the quarantined ground-truth correspondence table.
pub fn render_observations(
    scene: &Scene,
    pose: &Pose,
    model: &ProjectionModel,
    noise: &NoiseConfig,
    frame_id: u64,
    timestamp: f64,
    seed: u64,
) -> (FrameObservations, Vec<TruthMatch>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::new();
    let mut truth = Vec::new();
    for (idx, lm) in scene.landmarks.iter().enumerate() {
        let cam = pose.transform(&lm.position);
        let Ok(exact) = model.project(&cam) else {
            continue;
        };
        if noise.dropout > 0.0 && rng.random::<f64>() < noise.dropout {
            continue;
        }
        let pixel = if noise.pixel_sigma > 0.0 {
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            exact + Vector2::new(nx, ny) * noise.pixel_sigma
        } else {
            exact
        };
        // Noise can push a detection off the sensor; those are not observed.
        if !model.contains(&pixel) {
            continue;
        }
        let descriptor = if noise.descriptor_corruption > 0.0
            && rng.random::<f64>() < noise.descriptor_corruption
        {
            random_unit_descriptor(lm.descriptor.len(), &mut rng)
        } else {
            lm.descriptor.clone()
        };
        features.push(Feature { pixel, descriptor });
        truth.push(TruthMatch {
            feature: features.len() - 1,
            landmark: idx,
        });
    }
    (
        FrameObservations {
            frame_id,
            timestamp,
            features,
            model: *model,
        },
        truth,
    )
}

// ---------------------------------------------------------------------------
// Drift injection
// ---------------------------------------------------------------------------

/// Multiplicative scale drift applied to inter-keyframe translation
/// increments while building the prebuilt map, emulating accumulated
/// monocular scale error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftConfig {
    /// Fractional scale error reached at the end of the trajectory; the
    /// factor ramps linearly in arclength from 1 at the start to
    /// `1 + scale_at_end` at the end.
    pub scale_at_end: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self { scale_at_end: 0.0 }
    }
}

impl DriftConfig {
    /// Scale factor applied to the increment ending at normalized arclength
    /// `progress` in `[0, 1]`.
    pub fn factor_at(&self, progress: f64) -> f64 {
        1.0 + self.scale_at_end * progress.clamp(0.0, 1.0)
    }
}
