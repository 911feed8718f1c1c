//! On-disk dataset formats: scenes, per-frame observation lists, ground-truth
//! trajectories, and point maps.
//!
//! Floats are stored as their shortest exact decimal strings (the same
//! convention as the line-cloud schema), so save/load round trips reproduce
//! every value bit for bit and identical inputs serialize to identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::line_cloud::io::{
    fmt_f64, fmt_vec3, model_from_dto, model_to_dto, parse_f64, parse_vec3, pose_from_dto,
    pose_to_dto, MapIoError, ModelDto, PoseDto,
};
use crate::line_cloud::LineCloudMap;
use crate::map::{ClientMap, Keyframe, KfObservation, Landmark, LandmarkKind};
use crate::matching::{Feature, FrameObservations};
use crate::sim_world::{Scene, SceneLandmark};
use crate::slam::StampedPose;
use nalgebra::Vector2;

pub const POINT_MAP_SCHEMA_VERSION: u64 = 1;

fn fmt_pixel(p: &Vector2<f64>) -> Result<[String; 2], MapIoError> {
    Ok([fmt_f64(p.x)?, fmt_f64(p.y)?])
}

fn parse_pixel(p: &[String; 2]) -> Result<Vector2<f64>, MapIoError> {
    Ok(Vector2::new(parse_f64(&p[0])?, parse_f64(&p[1])?))
}

fn fmt_descriptor(d: &[f64]) -> Result<Vec<String>, MapIoError> {
    d.iter().map(|v| fmt_f64(*v)).collect()
}

fn parse_descriptor(d: &[String]) -> Result<Vec<f64>, MapIoError> {
    d.iter().map(|v| parse_f64(v)).collect()
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), MapIoError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| MapIoError::ParseError(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, MapIoError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| MapIoError::ParseError(e.to_string()))
}

// ---------------------------------------------------------------------------
// Scene
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDto {
    seed: u64,
    landmarks: Vec<SceneLandmarkDto>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneLandmarkDto {
    position: [String; 3],
    descriptor: Vec<String>,
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), MapIoError> {
    let dto = SceneDto {
        seed: scene.seed,
        landmarks: scene
            .landmarks
            .iter()
            .map(|l| {
                Ok(SceneLandmarkDto {
                    position: fmt_vec3(&l.position)?,
                    descriptor: fmt_descriptor(&l.descriptor)?,
                })
            })
            .collect::<Result<_, MapIoError>>()?,
    };
    write_json(&dto, path)
}

pub fn load_scene(path: &Path) -> Result<Scene, MapIoError> {
    let dto: SceneDto = read_json(path)?;
    let landmarks = dto
        .landmarks
        .iter()
        .map(|l| {
            Ok(SceneLandmark {
                position: parse_vec3(&l.position)?,
                descriptor: parse_descriptor(&l.descriptor)?,
            })
        })
        .collect::<Result<Vec<_>, MapIoError>>()?;
    if landmarks.is_empty() {
        return Err(MapIoError::InvariantViolation("scene has no landmarks".into()));
    }
    Ok(Scene {
        landmarks,
        seed: dto.seed,
    })
}

// ---------------------------------------------------------------------------
// Frame streams
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FramesDto {
    model: ModelDto,
    frames: Vec<FrameDto>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameDto {
    frame_id: u64,
    timestamp: String,
    features: Vec<FeatureDto>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureDto {
    pixel: [String; 2],
    descriptor: Vec<String>,
}

pub fn save_frames(frames: &[FrameObservations], path: &Path) -> Result<(), MapIoError> {
    let Some(first) = frames.first() else {
        return Err(MapIoError::InvariantViolation("empty frame stream".into()));
    };
    for f in frames {
        if f.model != first.model {
            return Err(MapIoError::InvariantViolation(
                "frames switch projection model mid-stream".into(),
            ));
        }
    }
    let dto = FramesDto {
        model: model_to_dto(&first.model)?,
        frames: frames
            .iter()
            .map(|f| {
                Ok(FrameDto {
                    frame_id: f.frame_id,
                    timestamp: fmt_f64(f.timestamp)?,
                    features: f
                        .features
                        .iter()
                        .map(|feat| {
                            Ok(FeatureDto {
                                pixel: fmt_pixel(&feat.pixel)?,
                                descriptor: fmt_descriptor(&feat.descriptor)?,
                            })
                        })
                        .collect::<Result<_, MapIoError>>()?,
                })
            })
            .collect::<Result<_, MapIoError>>()?,
    };
    write_json(&dto, path)
}

pub fn load_frames(path: &Path) -> Result<Vec<FrameObservations>, MapIoError> {
    let dto: FramesDto = read_json(path)?;
    let model = model_from_dto(&dto.model)?;
    let mut out = Vec::with_capacity(dto.frames.len());
    let mut last_id: Option<u64> = None;
    for f in &dto.frames {
        if last_id.is_some_and(|prev| f.frame_id <= prev) {
            return Err(MapIoError::InvariantViolation(format!(
                "frame ids must strictly increase (frame {})",
                f.frame_id
            )));
        }
        last_id = Some(f.frame_id);
        let frame = FrameObservations {
            frame_id: f.frame_id,
            timestamp: parse_f64(&f.timestamp)?,
            features: f
                .features
                .iter()
                .map(|feat| {
                    Ok(Feature {
                        pixel: parse_pixel(&feat.pixel)?,
                        descriptor: parse_descriptor(&feat.descriptor)?,
                    })
                })
                .collect::<Result<_, MapIoError>>()?,
            model,
        };
        frame
            .validate()
            .map_err(MapIoError::InvariantViolation)?;
        out.push(frame);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Trajectories (ground truth and estimates share one schema)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryDto {
    poses: Vec<StampedPoseDto>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StampedPoseDto {
    frame_id: u64,
    timestamp: String,
    pose: PoseDto,
}

pub fn save_trajectory(poses: &[StampedPose], path: &Path) -> Result<(), MapIoError> {
    let dto = TrajectoryDto {
        poses: poses
            .iter()
            .map(|s| {
                Ok(StampedPoseDto {
                    frame_id: s.frame_id,
                    timestamp: fmt_f64(s.timestamp)?,
                    pose: pose_to_dto(&s.pose)?,
                })
            })
            .collect::<Result<_, MapIoError>>()?,
    };
    write_json(&dto, path)
}

pub fn load_trajectory(path: &Path) -> Result<Vec<StampedPose>, MapIoError> {
    let dto: TrajectoryDto = read_json(path)?;
    dto.poses
        .iter()
        .map(|s| {
            Ok(StampedPose {
                frame_id: s.frame_id,
                timestamp: parse_f64(&s.timestamp)?,
                pose: pose_from_dto(&s.pose)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Point maps
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointMapDto {
    version: u64,
    model: ModelDto,
    keyframes: Vec<PointMapKeyframeDto>,
    landmarks: Vec<PointMapLandmarkDto>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointMapKeyframeDto {
    id: u64,
    pose: PoseDto,
    observations: Vec<ObservationDto>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservationDto {
    landmark: u64,
    pixel: [String; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointMapLandmarkDto {
    id: u64,
    position: [String; 3],
    descriptor: Vec<String>,
    /// Map line this landmark is constrained to, when it was reconstructed
    /// on one; absent for free points.
    #[serde(skip_serializing_if = "Option::is_none")]
    on_line: Option<u64>,
}

pub fn save_point_map(map: &ClientMap, path: &Path) -> Result<(), MapIoError> {
    let dto = PointMapDto {
        version: POINT_MAP_SCHEMA_VERSION,
        model: model_to_dto(&map.model)?,
        keyframes: map
            .keyframes
            .iter()
            .map(|kf| {
                Ok(PointMapKeyframeDto {
                    id: kf.id,
                    pose: pose_to_dto(&kf.pose)?,
                    observations: kf
                        .observations
                        .iter()
                        .map(|o| {
                            Ok(ObservationDto {
                                landmark: o.landmark,
                                pixel: fmt_pixel(&o.pixel)?,
                            })
                        })
                        .collect::<Result<_, MapIoError>>()?,
                })
            })
            .collect::<Result<_, MapIoError>>()?,
        landmarks: map
            .landmarks
            .iter()
            .map(|lm| {
                Ok(PointMapLandmarkDto {
                    id: lm.id,
                    position: fmt_vec3(&lm.position)?,
                    descriptor: fmt_descriptor(&lm.descriptor)?,
                    on_line: match lm.kind {
                        LandmarkKind::Point => None,
                        LandmarkKind::OnLine { line } => Some(line),
                    },
                })
            })
            .collect::<Result<_, MapIoError>>()?,
    };
    write_json(&dto, path)
}

/// Loads a point map. The returned map carries an empty line cloud as its
/// server side; callers that need one attach it separately.
pub fn load_point_map(path: &Path) -> Result<ClientMap, MapIoError> {
    let dto: PointMapDto = read_json(path)?;
    if dto.version != POINT_MAP_SCHEMA_VERSION {
        return Err(MapIoError::SchemaMismatch {
            found: dto.version,
            expected: POINT_MAP_SCHEMA_VERSION,
        });
    }
    let model = model_from_dto(&dto.model)?;
    let empty_server = LineCloudMap {
        model,
        keyframes: Vec::new(),
        lines: Vec::new(),
        virtual_observations: Vec::new(),
        visibility: Vec::new(),
    };
    let mut map = ClientMap::new(model, empty_server);

    let mut seen_landmarks = std::collections::BTreeSet::new();
    for lm in &dto.landmarks {
        if !seen_landmarks.insert(lm.id) {
            return Err(MapIoError::InvariantViolation(format!(
                "duplicate landmark id {}",
                lm.id
            )));
        }
        map.insert_landmark(Landmark {
            id: lm.id,
            position: parse_vec3(&lm.position)?,
            descriptor: parse_descriptor(&lm.descriptor)?,
            kind: match lm.on_line {
                None => LandmarkKind::Point,
                Some(line) => LandmarkKind::OnLine { line },
            },
        });
    }
    let mut last_kf: Option<u64> = None;
    for kf in &dto.keyframes {
        if last_kf.is_some_and(|prev| kf.id <= prev) {
            return Err(MapIoError::InvariantViolation(format!(
                "keyframe ids must strictly increase (keyframe {})",
                kf.id
            )));
        }
        last_kf = Some(kf.id);
        let observations = kf
            .observations
            .iter()
            .map(|o| {
                if !seen_landmarks.contains(&o.landmark) {
                    return Err(MapIoError::InvariantViolation(format!(
                        "keyframe {} observes unknown landmark {}",
                        kf.id, o.landmark
                    )));
                }
                Ok(KfObservation {
                    landmark: o.landmark,
                    pixel: parse_pixel(&o.pixel)?,
                })
            })
            .collect::<Result<_, MapIoError>>()?;
        map.insert_keyframe(Keyframe {
            id: kf.id,
            pose: pose_from_dto(&kf.pose)?,
            observations,
        });
    }
    if map.keyframes.is_empty() {
        return Err(MapIoError::InvariantViolation("point map has no keyframes".into()));
    }
    Ok(map)
}
