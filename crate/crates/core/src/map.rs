//! Client-side SLAM map: keyframes carrying 2D observations, point
//! landmarks, and reconstructed on-line landmarks, layered over a fixed
//! server line cloud loaded at startup.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};

use crate::geometry::{Pose, ProjectionModel};
use crate::line_cloud::LineCloudMap;

#[derive(Debug, Clone, PartialEq)]
pub struct KfObservation {
    pub landmark: u64,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub id: u64,
    /// World-to-camera pose.
    pub pose: Pose,
    pub observations: Vec<KfObservation>,
}

/// A landmark is either a client-triangulated free point or a point
/// reconstructed on (and attached to) a server line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LandmarkKind {
    Point,
    OnLine { line: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub id: u64,
    pub position: Vector3<f64>,
    pub descriptor: Vec<f64>,
    pub kind: LandmarkKind,
}

#[derive(Debug, Clone)]
pub struct ClientMap {
    pub model: ProjectionModel,
    /// Ascending by id.
    pub keyframes: Vec<Keyframe>,
    pub landmarks: Vec<Landmark>,
    /// The prebuilt privacy-safe map this session localizes against.
    pub server: LineCloudMap,
    landmark_index: BTreeMap<u64, usize>,
}

impl ClientMap {
    pub fn new(model: ProjectionModel, server: LineCloudMap) -> Self {
        Self {
            model,
            keyframes: Vec::new(),
            landmarks: Vec::new(),
            server,
            landmark_index: BTreeMap::new(),
        }
    }

    pub fn insert_keyframe(&mut self, kf: Keyframe) {
        debug_assert!(
            self.keyframes.last().map_or(true, |last| last.id < kf.id),
            "keyframe ids must be inserted in ascending order"
        );
        self.keyframes.push(kf);
    }

    pub fn insert_landmark(&mut self, lm: Landmark) {
        let idx = self.landmarks.len();
        let prev = self.landmark_index.insert(lm.id, idx);
        debug_assert!(prev.is_none(), "duplicate landmark id {}", lm.id);
        self.landmarks.push(lm);
    }

    pub fn keyframe(&self, id: u64) -> Option<&Keyframe> {
        self.keyframes
            .binary_search_by_key(&id, |k| k.id)
            .ok()
            .map(|i| &self.keyframes[i])
    }

    pub fn keyframe_mut(&mut self, id: u64) -> Option<&mut Keyframe> {
        self.keyframes
            .binary_search_by_key(&id, |k| k.id)
            .ok()
            .map(move |i| &mut self.keyframes[i])
    }

    pub fn landmark(&self, id: u64) -> Option<&Landmark> {
        self.landmark_index.get(&id).map(|&i| &self.landmarks[i])
    }

    pub fn landmark_mut(&mut self, id: u64) -> Option<&mut Landmark> {
        self.landmark_index
            .get(&id)
            .copied()
            .map(move |i| &mut self.landmarks[i])
    }

    pub fn next_landmark_id(&self) -> u64 {
        self.landmark_index
            .last_key_value()
            .map_or(0, |(&id, _)| id + 1)
    }

    /// Keyframes sharing at least `min_shared` observed landmarks with
    /// `kf_id`, ascending by id; the query keyframe itself is excluded.
    pub fn covisible(&self, kf_id: u64, min_shared: usize) -> Vec<u64> {
        let Some(kf) = self.keyframe(kf_id) else {
            return Vec::new();
        };
        let observed: std::collections::BTreeSet<u64> =
            kf.observations.iter().map(|o| o.landmark).collect();
        let mut out = Vec::new();
        for other in &self.keyframes {
            if other.id == kf_id {
                continue;
            }
            let shared = other
                .observations
                .iter()
                .filter(|o| observed.contains(&o.landmark))
                .count();
            if shared >= min_shared {
                out.push(other.id);
            }
        }
        out
    }

    /// All `(keyframe id, pixel)` observations of one landmark, in keyframe
    /// order.
    pub fn observations_of(&self, landmark_id: u64) -> Vec<(u64, Vector2<f64>)> {
        let mut out = Vec::new();
        for kf in &self.keyframes {
            for obs in &kf.observations {
                if obs.landmark == landmark_id {
                    out.push((kf.id, obs.pixel));
                }
            }
        }
        out
    }
}
