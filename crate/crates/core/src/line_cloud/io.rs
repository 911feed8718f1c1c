//! Line-cloud map file I/O.
//!
//! The on-disk format is versioned JSON with every float written as a
//! decimal string (shortest round-trip form), so save -> load -> save is
//! byte-identical. Loading walks the raw JSON against a field allowlist
//! before typed parsing: a map file has no field that could encode 2D
//! observations or original 3D points, and any unknown field is rejected.

use nalgebra::{Matrix3, Quaternion, Unit, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

use super::{Line3D, LineCloudMap, ServerKeyframe, VirtualObservation, VisibilityEntry};
use crate::geometry::{Pose, ProjectionModel};

pub const MAP_SCHEMA_VERSION: u64 = 1;

#[derive(Debug, thiserror::Error)]
pub enum MapIoError {
    #[error("map io: {0}")]
    Io(#[from] std::io::Error),
    #[error("map parse: {0}")]
    ParseError(String),
    #[error("map schema version {found} (expected {expected})")]
    SchemaMismatch { found: u64, expected: u64 },
    #[error("map invariant violated: {0}")]
    InvariantViolation(String),
}

pub(crate) fn fmt_f64(v: f64) -> Result<String, MapIoError> {
    if !v.is_finite() {
        return Err(MapIoError::InvariantViolation("non-finite float".into()));
    }
    Ok(format!("{v}"))
}

pub(crate) fn parse_f64(s: &str) -> Result<f64, MapIoError> {
    let v: f64 = s
        .parse()
        .map_err(|_| MapIoError::ParseError(format!("invalid float literal `{s}`")))?;
    if !v.is_finite() {
        return Err(MapIoError::InvariantViolation("non-finite float".into()));
    }
    Ok(v)
}

pub(crate) fn fmt_vec3(v: &Vector3<f64>) -> Result<[String; 3], MapIoError> {
    Ok([fmt_f64(v.x)?, fmt_f64(v.y)?, fmt_f64(v.z)?])
}

pub(crate) fn parse_vec3(v: &[String; 3]) -> Result<Vector3<f64>, MapIoError> {
    Ok(Vector3::new(parse_f64(&v[0])?, parse_f64(&v[1])?, parse_f64(&v[2])?))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapDto {
    version: u64,
    model: ModelDto,
    keyframes: Vec<KeyframeDto>,
    lines: Vec<LineDto>,
    virtual_observations: Vec<VobsDto>,
    visibility: Vec<VisibilityDto>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ModelDto {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    fx: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fy: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cx: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cy: Option<String>,
    width: String,
    height: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeyframeDto {
    id: u64,
    pose: PoseDto,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct PoseDto {
    /// Unit quaternion as [w, x, y, z].
    rotation: [String; 4],
    translation: [String; 3],
    scale: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineDto {
    base: [String; 3],
    direction: [String; 3],
    /// Row-major 3x3 information matrix.
    info: [String; 9],
    descriptor: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VobsDto {
    keyframe: u64,
    line: u64,
    normal: [String; 3],
    weight: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VisibilityDto {
    keyframe: u64,
    lines: Vec<u64>,
}

pub(crate) fn model_to_dto(model: &ProjectionModel) -> Result<ModelDto, MapIoError> {
    let (kind, fx, fy, cx, cy, width, height) = match *model {
        ProjectionModel::Perspective { fx, fy, cx, cy, width, height } => {
            ("perspective", Some(fx), Some(fy), Some(cx), Some(cy), width, height)
        }
        ProjectionModel::FisheyeEquidistant { fx, fy, cx, cy, width, height } => {
            ("fisheye_equidistant", Some(fx), Some(fy), Some(cx), Some(cy), width, height)
        }
        ProjectionModel::Equirectangular { width, height } => {
            ("equirectangular", None, None, None, None, width, height)
        }
    };
    Ok(ModelDto {
        kind: kind.to_string(),
        fx: fx.map(fmt_f64).transpose()?,
        fy: fy.map(fmt_f64).transpose()?,
        cx: cx.map(fmt_f64).transpose()?,
        cy: cy.map(fmt_f64).transpose()?,
        width: fmt_f64(width)?,
        height: fmt_f64(height)?,
    })
}

pub(crate) fn model_from_dto(dto: &ModelDto) -> Result<ProjectionModel, MapIoError> {
    let width = parse_f64(&dto.width)?;
    let height = parse_f64(&dto.height)?;
    let intrinsics = |dto: &ModelDto| -> Result<(f64, f64, f64, f64), MapIoError> {
        let get = |field: &Option<String>, name: &str| {
            field
                .as_deref()
                .ok_or_else(|| MapIoError::ParseError(format!("model is missing `{name}`")))
                .and_then(parse_f64)
        };
        Ok((
            get(&dto.fx, "fx")?,
            get(&dto.fy, "fy")?,
            get(&dto.cx, "cx")?,
            get(&dto.cy, "cy")?,
        ))
    };
    match dto.kind.as_str() {
        "perspective" => {
            let (fx, fy, cx, cy) = intrinsics(dto)?;
            Ok(ProjectionModel::Perspective { fx, fy, cx, cy, width, height })
        }
        "fisheye_equidistant" => {
            let (fx, fy, cx, cy) = intrinsics(dto)?;
            Ok(ProjectionModel::FisheyeEquidistant { fx, fy, cx, cy, width, height })
        }
        "equirectangular" => Ok(ProjectionModel::Equirectangular { width, height }),
        other => Err(MapIoError::ParseError(format!("unknown model kind `{other}`"))),
    }
}

pub(crate) fn pose_to_dto(pose: &Pose) -> Result<PoseDto, MapIoError> {
    let q = pose.rotation.quaternion();
    Ok(PoseDto {
        rotation: [fmt_f64(q.w)?, fmt_f64(q.i)?, fmt_f64(q.j)?, fmt_f64(q.k)?],
        translation: fmt_vec3(&pose.translation)?,
        scale: fmt_f64(pose.scale)?,
    })
}

pub(crate) fn pose_from_dto(dto: &PoseDto) -> Result<Pose, MapIoError> {
    let w = parse_f64(&dto.rotation[0])?;
    let i = parse_f64(&dto.rotation[1])?;
    let j = parse_f64(&dto.rotation[2])?;
    let k = parse_f64(&dto.rotation[3])?;
    let q = Quaternion::new(w, i, j, k);
    if (q.norm() - 1.0).abs() > 1e-9 {
        return Err(MapIoError::InvariantViolation("pose quaternion is not unit".into()));
    }
    // Unit::new_unchecked keeps the stored bits so round trips are exact.
    Ok(Pose::new(
        Unit::new_unchecked(q),
        parse_vec3(&dto.translation)?,
        parse_f64(&dto.scale)?,
    ))
}

/// Field allowlist walk over the raw JSON. This is the schema-level privacy
/// gate: any field outside the fixed vocabulary (for example injected 2D
/// observation arrays) is rejected before typed parsing.
fn check_allowlist(value: &Value) -> Result<(), MapIoError> {
    let object = |v: &Value, ctx: &str| -> Result<(), MapIoError> {
        if !v.is_object() {
            return Err(MapIoError::ParseError(format!("{ctx} is not an object")));
        }
        Ok(())
    };
    let keys_subset = |v: &Value, allowed: &[&str], ctx: &str| -> Result<(), MapIoError> {
        for key in v.as_object().unwrap().keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(MapIoError::InvariantViolation(format!(
                    "forbidden field `{key}` in {ctx}"
                )));
            }
        }
        Ok(())
    };

    object(value, "map root")?;
    keys_subset(
        value,
        &["version", "model", "keyframes", "lines", "virtual_observations", "visibility"],
        "map root",
    )?;
    if let Some(model) = value.get("model") {
        object(model, "model")?;
        keys_subset(model, &["kind", "fx", "fy", "cx", "cy", "width", "height"], "model")?;
    }
    for (name, allowed, nested) in [
        ("keyframes", &["id", "pose"][..], Some(("pose", &["rotation", "translation", "scale"][..]))),
        ("lines", &["base", "direction", "info", "descriptor"][..], None),
        ("virtual_observations", &["keyframe", "line", "normal", "weight"][..], None),
        ("visibility", &["keyframe", "lines"][..], None),
    ] {
        if let Some(Value::Array(items)) = value.get(name) {
            for item in items {
                object(item, name)?;
                keys_subset(item, allowed, name)?;
                if let Some((field, inner_allowed)) = nested {
                    if let Some(inner) = item.get(field) {
                        object(inner, field)?;
                        keys_subset(inner, inner_allowed, field)?;
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn save_map(map: &LineCloudMap, path: &Path) -> Result<(), MapIoError> {
    map.validate().map_err(MapIoError::InvariantViolation)?;
    let dto = MapDto {
        version: MAP_SCHEMA_VERSION,
        model: model_to_dto(&map.model)?,
        keyframes: map
            .keyframes
            .iter()
            .map(|k| Ok(KeyframeDto { id: k.id, pose: pose_to_dto(&k.pose)? }))
            .collect::<Result<_, MapIoError>>()?,
        lines: map
            .lines
            .iter()
            .map(|l| {
                let mut info = Vec::with_capacity(9);
                for r in 0..3 {
                    for c in 0..3 {
                        info.push(fmt_f64(l.info[(r, c)])?);
                    }
                }
                Ok(LineDto {
                    base: fmt_vec3(&l.base)?,
                    direction: fmt_vec3(&l.direction)?,
                    info: info.try_into().expect("nine entries"),
                    descriptor: l.descriptor.iter().map(|&v| fmt_f64(v)).collect::<Result<_, _>>()?,
                })
            })
            .collect::<Result<_, MapIoError>>()?,
        virtual_observations: map
            .virtual_observations
            .iter()
            .map(|v| {
                Ok(VobsDto {
                    keyframe: v.keyframe,
                    line: v.line,
                    normal: fmt_vec3(&v.normal)?,
                    weight: fmt_f64(v.weight)?,
                })
            })
            .collect::<Result<_, MapIoError>>()?,
        visibility: map
            .visibility
            .iter()
            .map(|v| VisibilityDto { keyframe: v.keyframe, lines: v.lines.clone() })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&dto)
        .map_err(|e| MapIoError::ParseError(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_map(path: &Path) -> Result<LineCloudMap, MapIoError> {
    let text = std::fs::read_to_string(path)?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| MapIoError::ParseError(e.to_string()))?;

    let version = value
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| MapIoError::ParseError("missing integer `version`".into()))?;
    if version != MAP_SCHEMA_VERSION {
        return Err(MapIoError::SchemaMismatch { found: version, expected: MAP_SCHEMA_VERSION });
    }
    check_allowlist(&value)?;

    let dto: MapDto =
        serde_json::from_value(value).map_err(|e| MapIoError::ParseError(e.to_string()))?;

    let mut lines = Vec::with_capacity(dto.lines.len());
    for l in &dto.lines {
        let mut info = Matrix3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                info[(r, c)] = parse_f64(&l.info[r * 3 + c])?;
            }
        }
        lines.push(Line3D {
            base: parse_vec3(&l.base)?,
            direction: parse_vec3(&l.direction)?,
            info,
            descriptor: l.descriptor.iter().map(|s| parse_f64(s)).collect::<Result<_, _>>()?,
        });
    }
    let map = LineCloudMap {
        model: model_from_dto(&dto.model)?,
        keyframes: dto
            .keyframes
            .iter()
            .map(|k| Ok(ServerKeyframe { id: k.id, pose: pose_from_dto(&k.pose)? }))
            .collect::<Result<_, MapIoError>>()?,
        lines,
        virtual_observations: dto
            .virtual_observations
            .iter()
            .map(|v| {
                Ok(VirtualObservation {
                    keyframe: v.keyframe,
                    line: v.line,
                    normal: parse_vec3(&v.normal)?,
                    weight: parse_f64(&v.weight)?,
                })
            })
            .collect::<Result<_, MapIoError>>()?,
        visibility: dto
            .visibility
            .into_iter()
            .map(|v| VisibilityEntry { keyframe: v.keyframe, lines: v.lines })
            .collect(),
    };
    map.validate().map_err(MapIoError::InvariantViolation)?;
    Ok(map)
}
