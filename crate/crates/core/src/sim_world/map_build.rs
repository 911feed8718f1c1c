//! Prebuilt-map construction: runs a point-only mapping pass over a seeded
//! trajectory (descriptor association, two-view triangulation, structure
//! refinement), injects multiplicative scale drift on the keyframe chain,
//! then lifts the result into a line cloud with virtual observations.

use nalgebra::{Matrix2, Matrix3, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{plane_normal, Pose, ProjectionModel};
use crate::line_cloud::{
    lift_point_to_line, LineCloudMap, ServerKeyframe, VirtualObservation, VisibilityEntry,
};
use crate::map::{ClientMap, Keyframe, KfObservation, Landmark, LandmarkKind};
use crate::matching::{descriptor_distance, triangulate_two_view};
use crate::optim::{lm_solve, LmConfig, Problem, Term};
use crate::residuals::RobustConfig;

use super::{
    derive_seed, render_observations, DriftConfig, NoiseConfig, Scene, SimError, TrajectorySpec,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapBuildConfig {
    /// Max descriptor distance for associating a feature to a track. Must
    /// stay below half the scene's descriptor separation so associations
    /// are unambiguous.
    pub descriptor_gate: f64,
    /// Minimum number of features per keyframe that associate to tracks
    /// started earlier; below this the build aborts with `TrackingLost`.
    pub min_keyframe_matches: usize,
    /// Minimum angle between the two triangulating rays, in radians.
    pub min_ray_angle: f64,
    /// Refine landmark positions against all their observations (poses held
    /// fixed) after triangulation.
    pub refine: bool,
    /// Isotropic std-dev of the per-point covariance used when lifting
    /// landmarks to lines, in meters.
    pub lift_sigma: f64,
    /// Weight of the generated virtual direction observations.
    pub virtual_weight: f64,
}

impl Default for MapBuildConfig {
    fn default() -> Self {
        Self {
            descriptor_gate: 0.25,
            min_keyframe_matches: 10,
            min_ray_angle: 0.2_f64.to_radians(),
            refine: true,
            lift_sigma: 0.05,
            virtual_weight: 100.0,
        }
    }
}

/// One multi-frame feature track, keyed by its first descriptor.
struct Track {
    descriptor: Vec<f64>,
    /// `(keyframe index, pixel)` in observation order.
    obs: Vec<(usize, Vector2<f64>)>,
}

/// Runs the point-only mapping pipeline over the trajectory and returns the
/// resulting point map together with its lifted line-cloud counterpart.
///
/// Keyframe rotations are taken from the trajectory; centers accumulate the
/// true inter-keyframe translation increments scaled by the drift profile,
/// so the stored chain carries exactly the configured scale error while the
/// rendered observations remain those of the true camera. Landmarks are
/// triangulated (and optionally refined) against the drifted chain, which
/// makes the map locally self-consistent but globally drifted, the regime
/// loop closure is meant to repair.
///
/// The line cloud shares the drifted keyframe poses, carries one line per
/// landmark (same ids), one virtual plane-normal observation per
/// (keyframe, visible line) pair, and no 2D measurements.
pub fn build_prebuilt_map(
    scene: &Scene,
    trajectory: &TrajectorySpec,
    model: &ProjectionModel,
    noise: &NoiseConfig,
    drift: &DriftConfig,
    config: &MapBuildConfig,
    seed: u64,
) -> Result<(ClientMap, LineCloudMap), SimError> {
    trajectory.validate()?;
    if scene.landmarks.is_empty() {
        return Err(SimError::Config("scene has zero landmarks".into()));
    }
    if !(config.lift_sigma > 0.0) {
        return Err(SimError::Config("lift_sigma must be positive".into()));
    }
    let stations = trajectory.keyframe_stations();
    if stations.len() < 2 {
        return Err(SimError::Config(
            "trajectory yields fewer than two keyframes".into(),
        ));
    }
    let length = trajectory.total_length();
    let true_poses: Vec<Pose> = stations.iter().map(|&s| trajectory.pose_at(s)).collect();

    let mut drifted: Vec<Pose> = Vec::with_capacity(true_poses.len());
    let mut center = true_poses[0].center();
    drifted.push(Pose::from_rotation_center(true_poses[0].rotation, center));
    for k in 1..true_poses.len() {
        let increment = true_poses[k].center() - true_poses[k - 1].center();
        center += increment * drift.factor_at(stations[k] / length);
        drifted.push(Pose::from_rotation_center(true_poses[k].rotation, center));
    }

    // Render all keyframes from the true camera, then associate features
    // into tracks purely by descriptor proximity.
    let mut tracks: Vec<Track> = Vec::new();
    let mut frames = Vec::with_capacity(true_poses.len());
    for (k, pose) in true_poses.iter().enumerate() {
        let (frame, _truth) = render_observations(
            scene,
            pose,
            model,
            noise,
            k as u64,
            stations[k],
            derive_seed(seed, 0x1000 + k as u64),
        );
        let mut matched_earlier = 0usize;
        for feature in &frame.features {
            let mut best: Option<(usize, f64)> = None;
            for (ti, track) in tracks.iter().enumerate() {
                let dist = descriptor_distance(&feature.descriptor, &track.descriptor);
                if dist < config.descriptor_gate && best.is_none_or(|(_, bd)| dist < bd) {
                    best = Some((ti, dist));
                }
            }
            match best {
                Some((ti, _)) => {
                    if tracks[ti].obs.last().is_some_and(|&(kf, _)| kf == k) {
                        // Two features of one frame fighting over a track
                        // means an ambiguous detection; keep the first.
                        continue;
                    }
                    if tracks[ti].obs[0].0 < k {
                        matched_earlier += 1;
                    }
                    tracks[ti].obs.push((k, feature.pixel));
                }
                None => tracks.push(Track {
                    descriptor: feature.descriptor.clone(),
                    obs: vec![(k, feature.pixel)],
                }),
            }
        }
        if k > 0 && matched_earlier < config.min_keyframe_matches {
            return Err(SimError::TrackingLost {
                keyframe: k,
                matched: matched_earlier,
                needed: config.min_keyframe_matches,
            });
        }
        frames.push(frame);
    }

    // Triangulate each track from its widest-baseline observation pair,
    // using the drifted chain so the map is consistent with itself.
    let empty_cloud = LineCloudMap {
        model: *model,
        keyframes: Vec::new(),
        lines: Vec::new(),
        virtual_observations: Vec::new(),
        visibility: Vec::new(),
    };
    let mut point_map = ClientMap::new(*model, empty_cloud.clone());
    let mut kf_obs: Vec<Vec<KfObservation>> = vec![Vec::new(); true_poses.len()];
    for track in &tracks {
        if track.obs.len() < 2 {
            continue;
        }
        let (k0, px0) = track.obs[0];
        let (kb, pxb) = track.obs[1..]
            .iter()
            .max_by(|(ka, _), (kc, _)| {
                let ba = (drifted[*ka].center() - drifted[k0].center()).norm();
                let bc = (drifted[*kc].center() - drifted[k0].center()).norm();
                ba.total_cmp(&bc)
            })
            .copied()
            .unwrap();
        let Some(position) = triangulate_two_view(
            &drifted[k0],
            &px0,
            &drifted[kb],
            &pxb,
            model,
            config.min_ray_angle,
        ) else {
            continue;
        };
        let id = point_map.next_landmark_id();
        point_map.insert_landmark(Landmark {
            id,
            position,
            descriptor: track.descriptor.clone(),
            kind: LandmarkKind::Point,
        });
        for &(k, pixel) in &track.obs {
            kf_obs[k].push(KfObservation {
                landmark: id,
                pixel,
            });
        }
    }
    for (k, obs) in kf_obs.into_iter().enumerate() {
        point_map.insert_keyframe(Keyframe {
            id: k as u64,
            pose: drifted[k],
            observations: obs,
        });
    }
    if point_map.landmarks.is_empty() {
        return Err(SimError::Config(
            "no landmark could be triangulated from the trajectory".into(),
        ));
    }

    // Landmark-only refinement against every observation. Poses stay fixed:
    // the drift profile is an input here, not something to optimize away.
    if config.refine {
        let mut problem = Problem::new(*model);
        problem.robust = RobustConfig::without_kernels();
        for kf in &point_map.keyframes {
            problem.add_pose(kf.pose, true, false);
        }
        for lm in &point_map.landmarks {
            problem.add_point(lm.position, false);
        }
        let index_of: std::collections::BTreeMap<u64, usize> = point_map
            .landmarks
            .iter()
            .enumerate()
            .map(|(i, lm)| (lm.id, i))
            .collect();
        for (k, kf) in point_map.keyframes.iter().enumerate() {
            for ob in &kf.observations {
                problem.terms.push(Term::Reproj {
                    pose: k,
                    pre: None,
                    point: index_of[&ob.landmark],
                    pixel: ob.pixel,
                    info: Matrix2::identity(),
                });
            }
        }
        lm_solve(&mut problem, &LmConfig::default())
            .map_err(|e| SimError::Config(format!("structure refinement failed: {e}")))?;
        for (i, lm) in point_map.landmarks.iter_mut().enumerate() {
            lm.position = problem.points[i].position;
        }
    }

    let line_map = lift_client_map(&point_map, config.lift_sigma, config.virtual_weight, seed)?;
    Ok((point_map, line_map))
}

/// Converts a point map into its privacy-preserving line-cloud counterpart:
/// every landmark becomes a line with a seeded random direction, every
/// keyframe keeps only its pose plus one plane-normal virtual observation
/// per visible line, and all 2D measurements are left behind.
pub fn lift_client_map(
    map: &ClientMap,
    lift_sigma: f64,
    virtual_weight: f64,
    seed: u64,
) -> Result<LineCloudMap, SimError> {
    if !(lift_sigma > 0.0) {
        return Err(SimError::Config("lift_sigma must be positive".into()));
    }
    let mut line_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x2000));
    let sigma = Matrix3::identity() * (lift_sigma * lift_sigma);
    let mut lines = Vec::with_capacity(map.landmarks.len());
    let mut line_index = std::collections::BTreeMap::new();
    for lm in &map.landmarks {
        let line = lift_point_to_line(&lm.position, &sigma, lm.descriptor.clone(), &mut line_rng)
            .map_err(|e| SimError::Config(format!("lift failed: {e}")))?;
        line_index.insert(lm.id, lines.len() as u64);
        lines.push(line);
    }

    let mut virtual_observations = Vec::new();
    let mut visibility = Vec::new();
    let mut server_keyframes = Vec::with_capacity(map.keyframes.len());
    for kf in &map.keyframes {
        let mut visible: Vec<u64> = kf
            .observations
            .iter()
            .filter_map(|o| line_index.get(&o.landmark).copied())
            .collect();
        visible.sort_unstable();
        visible.dedup();
        let mut kept = Vec::with_capacity(visible.len());
        for &line_id in &visible {
            let line = &lines[line_id as usize];
            // A line through the camera center has no observation plane.
            let Ok(normal) = plane_normal(&kf.pose, &line.base, &line.direction) else {
                continue;
            };
            virtual_observations.push(VirtualObservation {
                keyframe: kf.id,
                line: line_id,
                normal,
                weight: virtual_weight,
            });
            kept.push(line_id);
        }
        visibility.push(VisibilityEntry {
            keyframe: kf.id,
            lines: kept,
        });
        server_keyframes.push(ServerKeyframe {
            id: kf.id,
            pose: kf.pose,
        });
    }

    let line_map = LineCloudMap {
        model: map.model,
        keyframes: server_keyframes,
        lines,
        virtual_observations,
        visibility,
    };
    line_map
        .validate()
        .map_err(|e| SimError::Config(format!("generated line cloud is invalid: {e}")))?;
    Ok(line_map)
}
