//! Sequential visual SLAM against a prebuilt map: monocular two-view
//! bootstrap, constant-velocity tracking, keyframe-based local mapping, and
//! registration-driven relocalization and loop closure with optional
//! pose-graph and global-refinement stages.
//!
//! The schedule is strictly sequential (track, maybe map, maybe close a
//! loop), so a run is a pure function of the frame stream, the prebuilt map,
//! and the configured seed; wall-clock timing is collected on the side and
//! never feeds back into control flow.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use nalgebra::{DMatrix, Matrix3, Vector3};
use thiserror::Error;

use crate::derive_seed;
use crate::geometry::{Pose, ProjectionModel};
use crate::line_cloud::LineCloudMap;
use crate::map::{ClientMap, Keyframe, KfObservation, Landmark, LandmarkKind};
use crate::matching::{
    descriptor_distance, match_frame, reconstruct_point_on_line, triangulate_two_view, Feature,
    FrameObservations, LocalLine, LocalPoint, MatchConfig, MatchSet,
};
use crate::optim::{
    global_ba, local_ba, motion_only_ba, pose_graph_optimize, BaConfig, PgoEdge,
};
use crate::registration::{
    detect_candidates, ransac_register, CandidateConfig, CorrespondenceSet, PointLinePair,
    PointPointPair, RansacConfig, SolverKind,
};

#[derive(Debug, Error)]
pub enum SlamError {
    #[error("tracking lost at frame {frame} without recovery")]
    TrackingLost { frame: u64 },
    #[error("could not bootstrap a local map: {0}")]
    InitializationFailed(String),
    #[error("session never registered against the prebuilt map")]
    NeverRegistered,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// A prebuilt point map reduced to what localization needs: keyframe poses,
/// landmark positions with descriptors, and per-keyframe visibility.
#[derive(Debug, Clone)]
pub struct PointMapPrior {
    pub model: ProjectionModel,
    pub keyframes: Vec<(u64, Pose)>,
    /// `(id, position, descriptor)`, ascending by id.
    pub points: Vec<(u64, Vector3<f64>, Vec<f64>)>,
    /// Point ids visible per keyframe, parallel to `keyframes`.
    pub visibility: Vec<Vec<u64>>,
}

impl PointMapPrior {
    pub fn from_client_map(map: &ClientMap) -> Self {
        let keyframes: Vec<(u64, Pose)> = map.keyframes.iter().map(|k| (k.id, k.pose)).collect();
        let points = map
            .landmarks
            .iter()
            .map(|l| (l.id, l.position, l.descriptor.clone()))
            .collect();
        let visibility = map
            .keyframes
            .iter()
            .map(|k| {
                let mut ids: Vec<u64> = k.observations.iter().map(|o| o.landmark).collect();
                ids.sort_unstable();
                ids.dedup();
                ids
            })
            .collect();
        Self {
            model: map.model,
            keyframes,
            points,
            visibility,
        }
    }
}

/// The map a session localizes against.
#[derive(Debug, Clone)]
pub enum PrebuiltMap {
    Lines(LineCloudMap),
    Points(PointMapPrior),
}

#[derive(Debug, Clone)]
pub struct SlamConfig {
    pub seed: u64,
    pub matching: MatchConfig,
    pub ba: BaConfig,
    pub ransac: RansacConfig,
    pub candidates: CandidateConfig,
    /// Insert a keyframe when the fraction of current matches landing on
    /// landmarks the last keyframe observed drops below this.
    pub keyframe_ratio: f64,
    /// ... or when the baseline since the last keyframe exceeds this
    /// fraction of the median matched-landmark range.
    pub keyframe_baseline_frac: f64,
    /// Hard cap on frames between keyframes.
    pub max_kf_interval: usize,
    /// Below this many total matches the frame counts as lost.
    pub min_tracked: usize,
    /// Matches needed to accept the two-view bootstrap pair.
    pub init_min_matches: usize,
    /// Median triangulation parallax needed to accept the bootstrap pair,
    /// radians.
    pub init_min_parallax: f64,
    /// Shared-landmark count that makes two keyframes covisible.
    pub covisibility_min_shared: usize,
    /// Free keyframes per local bundle adjustment window.
    pub local_window: usize,
    /// Prebuilt-map keyframes whose primitives are offered to the matcher.
    pub map_neighbor_kfs: usize,
    /// Minimum ray angle for triangulating new landmarks, radians.
    pub triangulation_min_angle: f64,
    /// Descriptor gate for multi-keyframe track extension.
    pub track_desc_gate: f64,
    /// Descriptor gate for registration correspondences.
    pub corr_desc_gate: f64,
    /// Keyframes between registration attempts once registered.
    pub reloc_every_kfs: usize,
    /// Inliers a registration needs to be believed.
    pub loop_min_inliers: usize,
    /// Corrections below all three of these are treated as "already
    /// consistent" and do not trigger a loop closure: translation of the
    /// current center (map units), rotation angle (radians), |log scale|.
    pub loop_min_translation: f64,
    pub loop_min_rotation: f64,
    pub loop_min_log_scale: f64,
    /// Consecutive unrecovered frames before the run aborts.
    pub max_lost_frames: usize,
    /// Ablation toggles for the loop-closure stages.
    pub pgo: bool,
    pub global_ba: bool,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            matching: MatchConfig::default(),
            ba: BaConfig::default(),
            ransac: RansacConfig::default(),
            candidates: CandidateConfig::default(),
            keyframe_ratio: 0.7,
            keyframe_baseline_frac: 0.08,
            max_kf_interval: 10,
            min_tracked: 12,
            init_min_matches: 40,
            init_min_parallax: 1.0_f64.to_radians(),
            covisibility_min_shared: 15,
            local_window: 5,
            map_neighbor_kfs: 6,
            triangulation_min_angle: 0.5_f64.to_radians(),
            track_desc_gate: 0.25,
            corr_desc_gate: 0.35,
            reloc_every_kfs: 3,
            loop_min_inliers: 12,
            loop_min_translation: 0.1,
            loop_min_rotation: 0.02,
            loop_min_log_scale: 0.01,
            max_lost_frames: 20,
            pgo: true,
            global_ba: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub frame_id: u64,
    pub timestamp: f64,
    /// World-to-camera, in the prebuilt map's frame.
    pub pose: Pose,
}

/// Per-frame wall-clock timing, milliseconds. Excluded from determinism
/// guarantees.
#[derive(Debug, Clone, Copy)]
pub struct FrameTiming {
    pub frame_id: u64,
    pub match_ms: f64,
    pub motion_ba_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SlamEvent {
    Initialized {
        frame_id: u64,
    },
    Registered {
        frame_id: u64,
        solver: SolverKind,
        inliers: usize,
    },
    KeyframeInserted {
        frame_id: u64,
        keyframe: u64,
    },
    LoopClosed {
        frame_id: u64,
        translation_correction: f64,
        pgo_applied: bool,
        global_ba_applied: bool,
    },
    TrackingLost {
        frame_id: u64,
    },
    Recovered {
        frame_id: u64,
    },
}

#[derive(Debug)]
pub struct SlamOutput {
    /// Live per-frame pose estimates in the map frame, including frames
    /// tracked before registration (transformed retroactively).
    pub frame_trajectory: Vec<StampedPose>,
    /// Final keyframe poses after all optimization, the trajectory APE is
    /// evaluated on.
    pub keyframe_trajectory: Vec<StampedPose>,
    pub map: ClientMap,
    pub timing: Vec<FrameTiming>,
    pub events: Vec<SlamEvent>,
    pub lost_frames: usize,
}

// ---------------------------------------------------------------------------
// Two-view bootstrap
// ---------------------------------------------------------------------------

/// Mutual nearest-neighbor descriptor matches between two feature sets.
fn mutual_matches(a: &[Feature], b: &[Feature], gate: f64) -> Vec<(usize, usize, f64)> {
    let nearest = |from: &[Feature], to: &[Feature]| -> Vec<Option<(usize, f64)>> {
        from.iter()
            .map(|f| {
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in to.iter().enumerate() {
                    let d = descriptor_distance(&f.descriptor, &g.descriptor);
                    if d <= gate && best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((j, d));
                    }
                }
                best
            })
            .collect()
    };
    let ab = nearest(a, b);
    let ba = nearest(b, a);
    let mut out = Vec::new();
    for (i, m) in ab.iter().enumerate() {
        if let Some((j, d)) = m {
            if ba[*j].is_some_and(|(back, _)| back == i) {
                out.push((i, *j, *d));
            }
        }
    }
    out
}

/// Least-squares essential matrix from bearing correspondences
/// (`b1' E b0 = 0`), projected onto the essential-matrix manifold.
fn essential_from_bearings(b0: &[Vector3<f64>], b1: &[Vector3<f64>]) -> Option<Matrix3<f64>> {
    if b0.len() < 8 {
        return None;
    }
    let mut a = DMatrix::<f64>::zeros(b0.len(), 9);
    for (i, (p, q)) in b0.iter().zip(b1).enumerate() {
        for r in 0..3 {
            for c in 0..3 {
                a[(i, 3 * r + c)] = q[r] * p[c];
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let e = v_t.row(v_t.nrows() - 1);
    let raw = Matrix3::new(e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8]);
    let svd3 = raw.svd(true, true);
    let (u, v_t3) = (svd3.u?, svd3.v_t?);
    Some(u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)) * v_t3)
}

/// Decomposes an essential matrix into the four (R, t) candidates with
/// `x_cam1 = R x_cam0 + t` and `|t| = 1`.
fn decompose_essential(e: &Matrix3<f64>) -> Option<[Pose; 4]> {
    let svd = e.svd(true, true);
    let (mut u, mut v_t) = (svd.u?, svd.v_t?);
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t: Vector3<f64> = u.column(2).into_owned();
    let pose = |r: Matrix3<f64>, t: Vector3<f64>| {
        Pose::from_rt(
            nalgebra::UnitQuaternion::from_matrix(&r),
            t,
        )
    };
    Some([
        pose(r1, t),
        pose(r1, -t),
        pose(r2, t),
        pose(r2, -t),
    ])
}

struct Bootstrap {
    /// Pose of the second view (world = first camera frame), `|t| = 1`.
    pose1: Pose,
    /// `(feature in frame0, feature in frame1, triangulated point)`.
    landmarks: Vec<(usize, usize, Vector3<f64>)>,
}

fn try_bootstrap(
    frame0: &FrameObservations,
    frame1: &FrameObservations,
    config: &SlamConfig,
) -> Option<Bootstrap> {
    let model = &frame0.model;
    let matches = mutual_matches(
        &frame0.features,
        &frame1.features,
        config.track_desc_gate,
    );
    if matches.len() < config.init_min_matches {
        return None;
    }
    let mut b0 = Vec::with_capacity(matches.len());
    let mut b1 = Vec::with_capacity(matches.len());
    for (i, j, _) in &matches {
        b0.push(model.unproject(&frame0.features[*i].pixel).ok()?);
        b1.push(model.unproject(&frame1.features[*j].pixel).ok()?);
    }
    let e = essential_from_bearings(&b0, &b1)?;
    let candidates = decompose_essential(&e)?;

    let pose0 = Pose::identity();
    let score = |pose1: &Pose| -> usize {
        matches
            .iter()
            .filter(|(i, j, _)| {
                triangulate_two_view(
                    &pose0,
                    &frame0.features[*i].pixel,
                    pose1,
                    &frame1.features[*j].pixel,
                    model,
                    1e-4,
                )
                .is_some()
            })
            .count()
    };
    let scores: Vec<usize> = candidates.iter().map(score).collect();
    let best = (0..4).max_by_key(|&i| scores[i])?;
    // The winning decomposition must clearly dominate: with a healthy match
    // set, the wrong chirality places most points behind a camera.
    if scores[best] * 2 < matches.len() || scores.iter().filter(|&&s| s == scores[best]).count() > 1
    {
        return None;
    }
    let pose1 = candidates[best];

    let mut landmarks = Vec::new();
    let mut parallaxes = Vec::new();
    let c1 = pose1.center();
    for (i, j, _) in &matches {
        let Some(x) = triangulate_two_view(
            &pose0,
            &frame0.features[*i].pixel,
            &pose1,
            &frame1.features[*j].pixel,
            model,
            1e-4,
        ) else {
            continue;
        };
        let reproj_ok = |pose: &Pose, pixel: nalgebra::Vector2<f64>| -> bool {
            model
                .project(&pose.transform(&x))
                .ok()
                .is_some_and(|p| (p - pixel).norm() < 3.0)
        };
        if !reproj_ok(&pose0, frame0.features[*i].pixel)
            || !reproj_ok(&pose1, frame1.features[*j].pixel)
        {
            continue;
        }
        let parallax = x.normalize().angle(&(x - c1).normalize());
        parallaxes.push(parallax);
        landmarks.push((*i, *j, x));
    }
    if landmarks.len() < config.init_min_matches {
        return None;
    }
    parallaxes.sort_by(f64::total_cmp);
    if parallaxes[parallaxes.len() / 2] < config.init_min_parallax {
        return None;
    }
    Some(Bootstrap { pose1, landmarks })
}

// ---------------------------------------------------------------------------
// Session
// ---------------------------------------------------------------------------

struct PendingTrack {
    descriptor: Vec<f64>,
    obs: Vec<(u64, nalgebra::Vector2<f64>)>,
}

struct Session {
    config: SlamConfig,
    model: ProjectionModel,
    map: ClientMap,
    prior: Option<PointMapPrior>,
    /// Reverse index: prior point id -> keyframe slots listing it.
    prior_point_kfs: BTreeMap<u64, Vec<usize>>,

    phase: Phase,
    registered: bool,
    pose: Pose,
    prev_pose: Pose,
    last_kf: u64,
    last_kf_landmarks: BTreeSet<u64>,
    last_kf_obs_count: usize,
    frames_since_kf: usize,
    kfs_since_reloc: usize,
    next_kf_id: u64,
    lost_streak: usize,
    /// Map lines that already have a reconstructed on-line landmark.
    lines_with_xprime: BTreeSet<u64>,
    /// Client landmarks imported verbatim from a prebuilt point map; their
    /// positions are map-frame absolute and are not dragged along by
    /// pose-graph corrections.
    imported: BTreeSet<u64>,
    pending: Vec<PendingTrack>,
    /// Client keyframe id -> (frame id, timestamp).
    kf_meta: BTreeMap<u64, (u64, f64)>,

    /// Per-frame poses tracked before registration, in the bootstrap frame.
    local_trajectory: Vec<StampedPose>,
    trajectory: Vec<StampedPose>,
    timing: Vec<FrameTiming>,
    events: Vec<SlamEvent>,
    lost_frames: usize,
    registration_attempts: u64,
}

enum Phase {
    AwaitingFirst,
    AwaitingSecond { first: FrameObservations },
    Tracking,
}

impl Session {
    fn new(model: ProjectionModel, prebuilt: PrebuiltMap, config: SlamConfig) -> Self {
        let (server, prior) = match prebuilt {
            PrebuiltMap::Lines(cloud) => (cloud, None),
            PrebuiltMap::Points(prior) => (
                LineCloudMap {
                    model,
                    keyframes: Vec::new(),
                    lines: Vec::new(),
                    virtual_observations: Vec::new(),
                    visibility: Vec::new(),
                },
                Some(prior),
            ),
        };
        let mut prior_point_kfs: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        if let Some(p) = &prior {
            for (slot, ids) in p.visibility.iter().enumerate() {
                for id in ids {
                    prior_point_kfs.entry(*id).or_default().push(slot);
                }
            }
        }
        Self {
            map: ClientMap::new(model, server),
            prior,
            prior_point_kfs,
            config,
            model,
            phase: Phase::AwaitingFirst,
            registered: false,
            pose: Pose::identity(),
            prev_pose: Pose::identity(),
            last_kf: 0,
            last_kf_landmarks: BTreeSet::new(),
            last_kf_obs_count: 0,
            frames_since_kf: 0,
            kfs_since_reloc: 0,
            next_kf_id: 0,
            lost_streak: 0,
            lines_with_xprime: BTreeSet::new(),
            imported: BTreeSet::new(),
            pending: Vec::new(),
            kf_meta: BTreeMap::new(),
            local_trajectory: Vec::new(),
            trajectory: Vec::new(),
            timing: Vec::new(),
            events: Vec::new(),
            lost_frames: 0,
            registration_attempts: 0,
        }
    }

    fn velocity(&self) -> Pose {
        self.pose.compose(&self.prev_pose.inverse())
    }

    fn record_pose(&mut self, frame: &FrameObservations) {
        let sample = StampedPose {
            frame_id: frame.frame_id,
            timestamp: frame.timestamp,
            pose: self.pose,
        };
        if self.registered {
            self.trajectory.push(sample);
        } else {
            self.local_trajectory.push(sample);
        }
    }

    // -- candidate assembly -------------------------------------------------

    fn nearest_map_slots(&self, center: &Vector3<f64>) -> Vec<usize> {
        let poses: Vec<(usize, Vector3<f64>)> = match (&self.prior, &self.map.server) {
            (Some(p), _) => p
                .keyframes
                .iter()
                .enumerate()
                .map(|(i, (_, pose))| (i, pose.center()))
                .collect(),
            (None, cloud) => cloud
                .keyframes
                .iter()
                .enumerate()
                .map(|(i, k)| (i, k.pose.center()))
                .collect(),
        };
        let mut order: Vec<(f64, usize)> = poses
            .iter()
            .map(|(i, c)| ((c - center).norm(), *i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order
            .into_iter()
            .take(self.config.map_neighbor_kfs)
            .map(|(_, i)| i)
            .collect()
    }

    fn gather_candidates(&self, predicted: &Pose) -> (Vec<LocalPoint>, Vec<LocalLine>) {
        let mut point_ids: BTreeSet<u64> = BTreeSet::new();
        if self.map.keyframe(self.last_kf).is_some() {
            let mut window = vec![self.last_kf];
            window.extend(
                self.map
                    .covisible(self.last_kf, self.config.covisibility_min_shared),
            );
            for kf_id in window {
                if let Some(kf) = self.map.keyframe(kf_id) {
                    for obs in &kf.observations {
                        point_ids.insert(obs.landmark);
                    }
                }
            }
        }

        let mut lines = Vec::new();
        if self.registered {
            let center = predicted.center();
            let slots = self.nearest_map_slots(&center);
            if let Some(prior) = &self.prior {
                for slot in slots {
                    for id in &prior.visibility[slot] {
                        point_ids.insert(*id + self.prior_id_offset());
                    }
                }
            } else {
                let mut line_ids: BTreeSet<u64> = BTreeSet::new();
                for slot in slots {
                    for id in &self.map.server.visibility[slot].lines {
                        if !self.lines_with_xprime.contains(id) {
                            line_ids.insert(*id);
                        }
                    }
                }
                lines = line_ids
                    .into_iter()
                    .map(|id| LocalLine {
                        id,
                        line: self.map.server.lines[id as usize].clone(),
                    })
                    .collect();
            }
        }

        let points = point_ids
            .iter()
            .filter_map(|id| {
                self.map.landmark(*id).map(|lm| LocalPoint {
                    id: *id,
                    position: lm.position,
                    descriptor: lm.descriptor.clone(),
                })
            })
            .collect();
        (points, lines)
    }

    /// Imported prior points keep their prebuilt ids shifted past the local
    /// id range so both spaces can coexist in one map.
    fn prior_id_offset(&self) -> u64 {
        1 << 32
    }

    // -- keyframe insertion and local mapping -------------------------------

    fn insert_keyframe(
        &mut self,
        frame: &FrameObservations,
        matches: &MatchSet,
        xprimes: &[Vector3<f64>],
    ) {
        let kf_id = self.next_kf_id;
        self.next_kf_id += 1;
        let mut observations = Vec::new();
        let mut matched_features: BTreeSet<usize> = BTreeSet::new();

        for pm in &matches.points {
            observations.push(KfObservation {
                landmark: pm.landmark,
                pixel: frame.features[pm.feature].pixel,
            });
            matched_features.insert(pm.feature);
        }
        for (lm, xprime) in matches.lines.iter().zip(xprimes) {
            let id = self.map.next_landmark_id();
            self.map.insert_landmark(Landmark {
                id,
                position: *xprime,
                descriptor: frame.features[lm.feature].descriptor.clone(),
                kind: LandmarkKind::OnLine { line: lm.line },
            });
            self.lines_with_xprime.insert(lm.line);
            observations.push(KfObservation {
                landmark: id,
                pixel: frame.features[lm.feature].pixel,
            });
            matched_features.insert(lm.feature);
        }

        self.map.insert_keyframe(Keyframe {
            id: kf_id,
            pose: self.pose,
            observations,
        });
        self.kf_meta.insert(kf_id, (frame.frame_id, frame.timestamp));
        self.events.push(SlamEvent::KeyframeInserted {
            frame_id: frame.frame_id,
            keyframe: kf_id,
        });

        self.extend_tracks(frame, &matched_features, kf_id);
        self.triangulate_pending(kf_id);

        let kf = self.map.keyframe(kf_id).unwrap();
        self.last_kf = kf_id;
        self.last_kf_landmarks = kf.observations.iter().map(|o| o.landmark).collect();
        self.last_kf_obs_count = kf.observations.len().max(1);
        self.frames_since_kf = 0;

        if self.map.keyframes.len() >= 3 {
            let mut window = vec![kf_id];
            window.extend(
                self.map
                    .covisible(kf_id, self.config.covisibility_min_shared)
                    .into_iter()
                    .rev()
                    .take(self.config.local_window.saturating_sub(1)),
            );
            // At least one keyframe must stay outside the window as a fixed
            // anchor or the solve has a free gauge.
            window.truncate(self.map.keyframes.len() - 1);
            if !window.is_empty() {
                // A failed window solve (thin geometry right after
                // bootstrap) leaves the map as it was; tracking carries on.
                let _ = local_ba(&mut self.map, &window, &self.config.ba);
            }
            if let Some(kf) = self.map.keyframe(kf_id) {
                let vel = self.velocity();
                self.pose = kf.pose;
                self.prev_pose = vel.inverse().compose(&self.pose);
            }
        }
    }

    fn extend_tracks(
        &mut self,
        frame: &FrameObservations,
        matched: &BTreeSet<usize>,
        kf_id: u64,
    ) {
        for (fi, feature) in frame.features.iter().enumerate() {
            if matched.contains(&fi) {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for (ti, track) in self.pending.iter().enumerate() {
                let d = descriptor_distance(&feature.descriptor, &track.descriptor);
                if d <= self.config.track_desc_gate && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((ti, d));
                }
            }
            match best {
                Some((ti, _)) => {
                    let track = &mut self.pending[ti];
                    if track.obs.last().is_none_or(|&(k, _)| k != kf_id) {
                        track.obs.push((kf_id, feature.pixel));
                    }
                }
                None => self.pending.push(PendingTrack {
                    descriptor: feature.descriptor.clone(),
                    obs: vec![(kf_id, feature.pixel)],
                }),
            }
        }
    }

    fn triangulate_pending(&mut self, current_kf: u64) {
        let mut remaining = Vec::new();
        for track in std::mem::take(&mut self.pending) {
            let extended_now = track.obs.last().is_some_and(|&(k, _)| k == current_kf);
            if track.obs.len() < 2 || !extended_now {
                // Tracks that stopped being seen age out quietly.
                let last_seen = track.obs.last().map_or(0, |&(k, _)| k);
                if current_kf.saturating_sub(last_seen) <= 8 {
                    remaining.push(track);
                }
                continue;
            }
            let (k0, px0) = track.obs[0];
            let (kb, pxb) = *track.obs.last().unwrap();
            let (Some(pose0), Some(poseb)) = (
                self.map.keyframe(k0).map(|k| k.pose),
                self.map.keyframe(kb).map(|k| k.pose),
            ) else {
                continue;
            };
            match triangulate_two_view(
                &pose0,
                &px0,
                &poseb,
                &pxb,
                &self.model,
                self.config.triangulation_min_angle,
            ) {
                Some(position) => {
                    let id = self.map.next_landmark_id();
                    self.map.insert_landmark(Landmark {
                        id,
                        position,
                        descriptor: track.descriptor.clone(),
                        kind: LandmarkKind::Point,
                    });
                    for (k, px) in &track.obs {
                        if let Some(kf) = self.map.keyframe_mut(*k) {
                            kf.observations.push(KfObservation {
                                landmark: id,
                                pixel: *px,
                            });
                        }
                    }
                }
                None => remaining.push(track),
            }
        }
        self.pending = remaining;
    }

    // -- registration and loop closure --------------------------------------

    fn candidate_map_slots(&self, query: &[Vec<f64>]) -> Vec<usize> {
        if let Some(prior) = &self.prior {
            // Vote per prebuilt keyframe through each query feature's nearest
            // map point, mirroring the line-cloud candidate detector.
            let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
            for desc in query {
                let mut best: Option<(u64, f64)> = None;
                for (id, _, d) in &prior.points {
                    let dist = descriptor_distance(desc, d);
                    if dist <= self.config.candidates.max_desc_dist
                        && best.is_none_or(|(_, bd)| dist < bd)
                    {
                        best = Some((*id, dist));
                    }
                }
                if let Some((id, _)) = best {
                    if let Some(slots) = self.prior_point_kfs.get(&id) {
                        for slot in slots {
                            *votes.entry(*slot).or_insert(0) += 1;
                        }
                    }
                }
            }
            let mut ranked: Vec<(usize, usize)> = votes.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked
                .into_iter()
                .filter(|(_, v)| *v >= self.config.candidates.min_matches)
                .take(self.config.candidates.top_k)
                .map(|(slot, _)| slot)
                .collect()
        } else {
            let Ok(ranked) = detect_candidates(query, &self.map.server, &self.config.candidates)
            else {
                return Vec::new();
            };
            ranked
                .into_iter()
                .filter_map(|(kf_id, _)| {
                    self.map
                        .server
                        .keyframes
                        .iter()
                        .position(|k| k.id == kf_id)
                })
                .collect()
        }
    }

    /// Landmarks observed by the most recent client keyframes, the local
    /// side of registration correspondences.
    fn recent_landmarks(&self, window: usize) -> Vec<(u64, Vector3<f64>, &Vec<f64>)> {
        let start = self.next_kf_id.saturating_sub(window as u64);
        let mut ids: BTreeSet<u64> = BTreeSet::new();
        for kf in &self.map.keyframes {
            if kf.id >= start {
                for obs in &kf.observations {
                    ids.insert(obs.landmark);
                }
            }
        }
        ids.into_iter()
            .filter_map(|id| {
                self.map
                    .landmark(id)
                    .map(|lm| (id, lm.position, &lm.descriptor))
            })
            .collect()
    }

    fn attempt_registration(&mut self, frame: &FrameObservations) {
        self.registration_attempts += 1;
        let query: Vec<Vec<f64>> = frame
            .features
            .iter()
            .map(|f| f.descriptor.clone())
            .collect();
        let slots = self.candidate_map_slots(&query);
        if slots.is_empty() {
            return;
        }

        let locals = self.recent_landmarks(12);
        if locals.is_empty() {
            return;
        }
        let mut corr = CorrespondenceSet::default();
        // Which local landmark and map primitive each correspondence links,
        // parallel to the pair lists, for the post-inlier bookkeeping.
        let mut pl_meta: Vec<(u64, u64)> = Vec::new();
        let mut pp_meta: Vec<(u64, u64)> = Vec::new();

        if let Some(prior) = &self.prior {
            let mut target_ids: BTreeSet<u64> = BTreeSet::new();
            for slot in &slots {
                target_ids.extend(prior.visibility[*slot].iter().copied());
            }
            let targets: Vec<&(u64, Vector3<f64>, Vec<f64>)> = prior
                .points
                .iter()
                .filter(|(id, _, _)| target_ids.contains(id))
                .collect();
            for (local_id, position, desc) in &locals {
                let mut best: Option<(usize, f64)> = None;
                for (ti, (_, _, tdesc)) in targets.iter().enumerate() {
                    let d = descriptor_distance(desc, tdesc);
                    if d <= self.config.corr_desc_gate && best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((ti, d));
                    }
                }
                if let Some((ti, d)) = best {
                    let (tid, tpos, _) = targets[ti];
                    corr.point_point.push(PointPointPair {
                        local: *position,
                        map: *tpos,
                        desc_dist: d,
                    });
                    pp_meta.push((*local_id, *tid));
                }
            }
        } else {
            let mut line_ids: BTreeSet<u64> = BTreeSet::new();
            for slot in &slots {
                line_ids.extend(self.map.server.visibility[*slot].lines.iter().copied());
            }
            for (local_id, position, desc) in &locals {
                let mut best: Option<(u64, f64)> = None;
                for line_id in &line_ids {
                    let d = descriptor_distance(
                        desc,
                        &self.map.server.lines[*line_id as usize].descriptor,
                    );
                    if d <= self.config.corr_desc_gate && best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((*line_id, d));
                    }
                }
                if let Some((line_id, d)) = best {
                    corr.point_line.push(PointLinePair {
                        local: *position,
                        line: self.map.server.lines[line_id as usize].clone(),
                        desc_dist: d,
                    });
                    pl_meta.push((*local_id, line_id));
                }
            }
        }

        if corr.len() < self.config.loop_min_inliers {
            return;
        }
        let ransac = RansacConfig {
            seed: derive_seed(self.config.seed, 0xAE60 + self.registration_attempts),
            ..self.config.ransac
        };
        let Ok(reg) = ransac_register(&corr, &ransac) else {
            return;
        };
        if reg.pp_inliers.len() + reg.pl_inliers.len() < self.config.loop_min_inliers {
            return;
        }

        if !self.registered {
            self.apply_registration(&reg.sim3, &reg.pl_inliers, &pl_meta);
            self.events.push(SlamEvent::Registered {
                frame_id: frame.frame_id,
                solver: reg.solver,
                inliers: reg.pp_inliers.len() + reg.pl_inliers.len(),
            });
        } else {
            self.maybe_close_loop(frame, &reg.sim3, &reg.pl_inliers, &pl_meta);
        }
    }

    fn apply_registration(&mut self, sim3: &Pose, pl_inliers: &[usize], pl_meta: &[(u64, u64)]) {
        let inv = sim3.inverse();
        for kf in &mut self.map.keyframes {
            kf.pose = kf.pose.compose(&inv).normalized_se3();
        }
        for lm in &mut self.map.landmarks {
            lm.position = sim3.transform(&lm.position);
        }
        self.pose = self.pose.compose(&inv).normalized_se3();
        self.prev_pose = self.prev_pose.compose(&inv).normalized_se3();
        for sample in &mut self.local_trajectory {
            sample.pose = sample.pose.compose(&inv).normalized_se3();
        }
        self.trajectory.append(&mut self.local_trajectory);

        for idx in pl_inliers {
            let (local_id, line_id) = pl_meta[*idx];
            if let Some(lm) = self.map.landmark_mut(local_id) {
                lm.kind = LandmarkKind::OnLine { line: line_id };
                self.lines_with_xprime.insert(line_id);
            }
        }

        // Point-map backend: adopt the prior's landmarks so tracking can
        // match against them directly. Locals that already duplicate a map
        // point (same descriptor within the track gate) stay authoritative
        // for their own observations; the map copy is skipped.
        if let Some(prior) = self.prior.take() {
            let offset = self.prior_id_offset();
            for (id, position, descriptor) in &prior.points {
                let duplicate = self.map.landmarks.iter().any(|lm| {
                    descriptor_distance(&lm.descriptor, descriptor) <= self.config.track_desc_gate
                });
                if !duplicate {
                    self.map.insert_landmark(Landmark {
                        id: *id + offset,
                        position: *position,
                        descriptor: descriptor.clone(),
                        kind: LandmarkKind::Point,
                    });
                    self.imported.insert(*id + offset);
                }
            }
            self.prior = Some(prior);
        }
        self.registered = true;
    }

    fn maybe_close_loop(
        &mut self,
        frame: &FrameObservations,
        sim3: &Pose,
        pl_inliers: &[usize],
        pl_meta: &[(u64, u64)],
    ) {
        let center = self.pose.center();
        let translation_correction = (sim3.transform(&center) - center).norm();
        let rotation_correction = sim3.rotation.angle();
        let scale_correction = sim3.scale.ln().abs();
        if translation_correction < self.config.loop_min_translation
            && rotation_correction < self.config.loop_min_rotation
            && scale_correction < self.config.loop_min_log_scale
        {
            return;
        }
        if self.map.keyframes.len() < 10 {
            return;
        }

        let pgo_applied = self.config.pgo;
        let gba_applied = self.config.global_ba;
        let old_last = self.map.keyframe(self.last_kf).map(|k| k.pose);
        if pgo_applied {
            self.run_pgo(sim3);
        }
        if gba_applied {
            // A diverged refinement leaves the pose-graph solution standing.
            let _ = global_ba(&mut self.map, &self.config.ba);
        }
        // Keep the live pose rigidly attached to the last keyframe across
        // whatever the optimizers did to it, and preserve the velocity
        // estimate so the next prediction stays smooth.
        if let (Some(old), Some(new)) = (
            old_last,
            self.map.keyframe(self.last_kf).map(|k| k.pose),
        ) {
            let vel = self.velocity();
            let rel = self.pose.compose(&old.inverse());
            self.pose = rel.compose(&new).normalized_se3();
            self.prev_pose = vel.inverse().compose(&self.pose);
        }
        if pgo_applied || gba_applied {
            for idx in pl_inliers {
                let (local_id, line_id) = pl_meta[*idx];
                if let Some(lm) = self.map.landmark_mut(local_id) {
                    if matches!(lm.kind, LandmarkKind::Point) {
                        lm.kind = LandmarkKind::OnLine { line: line_id };
                        self.lines_with_xprime.insert(line_id);
                    }
                }
            }
        }
        self.events.push(SlamEvent::LoopClosed {
            frame_id: frame.frame_id,
            translation_correction,
            pgo_applied,
            global_ba_applied: gba_applied,
        });
    }

    fn run_pgo(&mut self, sim3: &Pose) {
        let old: Vec<(u64, Pose)> = self.map.keyframes.iter().map(|k| (k.id, k.pose)).collect();
        let poses: Vec<Pose> = old.iter().map(|(_, p)| *p).collect();
        let n = poses.len();
        let mut edges = Vec::with_capacity(n);
        for i in 0..n - 1 {
            edges.push(PgoEdge::between(i, i + 1, &poses[i], &poses[i + 1]));
        }
        // The registration pins the newest keyframe to where the map says it
        // is; odometry edges then spread the correction along the chain.
        let corrected_last = poses[n - 1].compose(&sim3.inverse()).normalized_se3();
        edges.push(PgoEdge::between(0, n - 1, &poses[0], &corrected_last));

        let Ok((solved, _)) = pose_graph_optimize(&poses, 0, &edges, &self.config.ba.lm) else {
            return;
        };

        let mut first_observer: BTreeMap<u64, u64> = BTreeMap::new();
        for kf in &self.map.keyframes {
            for obs in &kf.observations {
                first_observer.entry(obs.landmark).or_insert(kf.id);
            }
        }
        let old_by_id: BTreeMap<u64, Pose> = old.iter().copied().collect();
        let new_by_id: BTreeMap<u64, Pose> = old
            .iter()
            .enumerate()
            .map(|(i, (id, _))| (*id, solved[i].normalized_se3()))
            .collect();
        for kf in &mut self.map.keyframes {
            kf.pose = new_by_id[&kf.id];
        }
        // Landmarks ride along with their first observer; prior-map imports
        // stay put because their coordinates come from the map itself.
        for lm in &mut self.map.landmarks {
            if self.imported.contains(&lm.id) {
                continue;
            }
            let Some(kf_id) = first_observer.get(&lm.id) else {
                continue;
            };
            let delta = new_by_id[kf_id].inverse().compose(&old_by_id[kf_id]);
            lm.position = delta.transform(&lm.position);
        }
    }

    // -- per-frame driver ----------------------------------------------------

    fn process(&mut self, frame: &FrameObservations) -> Result<(), SlamError> {
        frame
            .validate()
            .map_err(|e| SlamError::InvalidInput(e.to_string()))?;
        match std::mem::replace(&mut self.phase, Phase::Tracking) {
            Phase::AwaitingFirst => {
                self.phase = Phase::AwaitingSecond {
                    first: frame.clone(),
                };
                Ok(())
            }
            Phase::AwaitingSecond { first } => match try_bootstrap(&first, frame, &self.config) {
                Some(boot) => {
                    self.initialize(&first, frame, boot);
                    self.attempt_registration(frame);
                    Ok(())
                }
                None => {
                    // Parallax grows as the camera moves, but a reference
                    // that stays unusable for long is probably degenerate
                    // (pure rotation, occlusion); swap it out.
                    let stale = frame.frame_id.saturating_sub(first.frame_id) > 10;
                    self.phase = Phase::AwaitingSecond {
                        first: if stale { frame.clone() } else { first },
                    };
                    Ok(())
                }
            },
            Phase::Tracking => self.track(frame),
        }
    }

    fn initialize(&mut self, first: &FrameObservations, second: &FrameObservations, boot: Bootstrap) {
        let mut obs0 = Vec::with_capacity(boot.landmarks.len());
        let mut obs1 = Vec::with_capacity(boot.landmarks.len());
        let mut matched0 = BTreeSet::new();
        let mut matched1 = BTreeSet::new();
        for (i, j, position) in &boot.landmarks {
            let id = self.map.next_landmark_id();
            self.map.insert_landmark(Landmark {
                id,
                position: *position,
                descriptor: first.features[*i].descriptor.clone(),
                kind: LandmarkKind::Point,
            });
            obs0.push(KfObservation {
                landmark: id,
                pixel: first.features[*i].pixel,
            });
            obs1.push(KfObservation {
                landmark: id,
                pixel: second.features[*j].pixel,
            });
            matched0.insert(*i);
            matched1.insert(*j);
        }
        self.map.insert_keyframe(Keyframe {
            id: 0,
            pose: Pose::identity(),
            observations: obs0,
        });
        self.map.insert_keyframe(Keyframe {
            id: 1,
            pose: boot.pose1,
            observations: obs1,
        });
        self.kf_meta.insert(0, (first.frame_id, first.timestamp));
        self.kf_meta.insert(1, (second.frame_id, second.timestamp));
        self.next_kf_id = 2;

        self.pose = boot.pose1;
        self.prev_pose = boot.pose1;
        self.local_trajectory.push(StampedPose {
            frame_id: first.frame_id,
            timestamp: first.timestamp,
            pose: Pose::identity(),
        });
        self.local_trajectory.push(StampedPose {
            frame_id: second.frame_id,
            timestamp: second.timestamp,
            pose: boot.pose1,
        });

        let kf1 = self.map.keyframe(1).unwrap();
        self.last_kf = 1;
        self.last_kf_landmarks = kf1.observations.iter().map(|o| o.landmark).collect();
        self.last_kf_obs_count = kf1.observations.len().max(1);
        self.extend_tracks(first, &matched0, 0);
        self.extend_tracks(second, &matched1, 1);
        self.events.push(SlamEvent::Initialized {
            frame_id: second.frame_id,
        });
    }

    fn track(&mut self, frame: &FrameObservations) -> Result<(), SlamError> {
        let t_start = Instant::now();
        let mut predicted = self.velocity().compose(&self.pose);
        let (points, lines) = self.gather_candidates(&predicted);

        let t_match = Instant::now();
        let mut matches = match_frame(frame, &points, &lines, &predicted, &self.config.matching);
        let mut recovered_wide = false;
        if matches.points.len() + matches.lines.len() < self.config.min_tracked {
            // Retry around the last known pose with a wide search radius;
            // the velocity model is the usual culprit after a skipped frame.
            predicted = self.pose;
            let wide = MatchConfig {
                radius_px: self.config.matching.radius_px * 4.0,
                ..self.config.matching
            };
            matches = match_frame(frame, &points, &lines, &predicted, &wide);
            recovered_wide = true;
        }
        let match_ms = ms_since(t_match);

        let total_matches = matches.points.len() + matches.lines.len();
        if total_matches < self.config.min_tracked {
            return self.mark_lost(frame);
        }

        let xprime_init: Vec<Vector3<f64>> = matches
            .lines
            .iter()
            .map(|m| {
                reconstruct_point_on_line(
                    &frame.features[m.feature].pixel,
                    &predicted,
                    &self.map.server.lines[m.line as usize],
                    &self.model,
                )
                .unwrap_or(m.sample)
            })
            .collect();

        let t_ba = Instant::now();
        let result = match motion_only_ba(
            &predicted,
            frame,
            &matches,
            &points,
            &lines,
            &xprime_init,
            &self.config.ba,
        ) {
            Ok(r) => r,
            Err(_) => return self.mark_lost(frame),
        };
        let motion_ba_ms = ms_since(t_ba);

        if self.lost_streak > 0 {
            self.events.push(SlamEvent::Recovered {
                frame_id: frame.frame_id,
            });
        }
        self.lost_streak = 0;
        self.prev_pose = if recovered_wide { result.pose } else { self.pose };
        self.pose = result.pose;
        self.record_pose(frame);
        self.frames_since_kf += 1;

        if self.should_insert_keyframe(&matches) {
            self.insert_keyframe(frame, &matches, &result.xprimes);
            self.kfs_since_reloc += 1;
            if !self.registered || self.kfs_since_reloc >= self.config.reloc_every_kfs {
                self.attempt_registration(frame);
                self.kfs_since_reloc = 0;
            }
        }

        self.timing.push(FrameTiming {
            frame_id: frame.frame_id,
            match_ms,
            motion_ba_ms,
            total_ms: ms_since(t_start),
        });
        Ok(())
    }

    fn should_insert_keyframe(&self, matches: &MatchSet) -> bool {
        if self.frames_since_kf >= self.config.max_kf_interval {
            return true;
        }
        let tracked_in_last = matches
            .points
            .iter()
            .filter(|m| self.last_kf_landmarks.contains(&m.landmark))
            .count();
        let ratio = tracked_in_last as f64 / self.last_kf_obs_count as f64;
        if ratio < self.config.keyframe_ratio {
            return true;
        }
        let Some(last_kf) = self.map.keyframe(self.last_kf) else {
            return false;
        };
        let center = self.pose.center();
        let mut ranges: Vec<f64> = matches
            .points
            .iter()
            .filter_map(|m| self.map.landmark(m.landmark))
            .map(|lm| (lm.position - center).norm())
            .collect();
        if ranges.is_empty() {
            return false;
        }
        ranges.sort_by(f64::total_cmp);
        let median_range = ranges[ranges.len() / 2];
        let baseline = (center - last_kf.pose.center()).norm();
        baseline > self.config.keyframe_baseline_frac * median_range
    }

    fn mark_lost(&mut self, frame: &FrameObservations) -> Result<(), SlamError> {
        self.lost_streak += 1;
        self.lost_frames += 1;
        self.events.push(SlamEvent::TrackingLost {
            frame_id: frame.frame_id,
        });
        if self.lost_streak > self.config.max_lost_frames {
            return Err(SlamError::TrackingLost {
                frame: frame.frame_id,
            });
        }
        // Freeze the motion model; the next frame retries from here.
        self.prev_pose = self.pose;
        Ok(())
    }
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Runs the full pipeline over an ordered frame stream.
pub fn run_slam(
    frames: &[FrameObservations],
    prebuilt: &PrebuiltMap,
    config: &SlamConfig,
) -> Result<SlamOutput, SlamError> {
    if frames.is_empty() {
        return Err(SlamError::InvalidInput("empty frame stream".into()));
    }
    let model = frames[0].model;
    for (i, f) in frames.iter().enumerate() {
        if f.model != model {
            return Err(SlamError::InvalidInput(format!(
                "frame {i} switches projection model"
            )));
        }
    }
    let mut session = Session::new(model, prebuilt.clone(), config.clone());
    for frame in frames {
        session.process(frame)?;
    }
    if !session.registered {
        return Err(SlamError::NeverRegistered);
    }
    let mut keyframe_trajectory: Vec<StampedPose> = session
        .map
        .keyframes
        .iter()
        .filter_map(|kf| {
            session.kf_meta.get(&kf.id).map(|(frame_id, timestamp)| StampedPose {
                frame_id: *frame_id,
                timestamp: *timestamp,
                pose: kf.pose,
            })
        })
        .collect();
    keyframe_trajectory.sort_by_key(|s| s.frame_id);
    Ok(SlamOutput {
        frame_trajectory: session.trajectory,
        keyframe_trajectory,
        map: session.map,
        timing: session.timing,
        events: session.events,
        lost_frames: session.lost_frames,
    })
}
