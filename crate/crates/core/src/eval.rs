//! Absolute pose error metrics and report rendering.
//!
//! Errors are measured directly in the global map frame with no trajectory
//! alignment: registration already expresses estimates in map coordinates,
//! so aligning would mask exactly the errors being measured.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::line_cloud::LineCloudMap;
use crate::slam::{FrameTiming, StampedPose};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("estimated frame {frame_id} has no ground-truth pose")]
    LengthMismatch { frame_id: u64 },
    #[error("no poses to evaluate")]
    EmptyTrajectory,
    #[error("no runs to report")]
    EmptyReport,
    #[error("report io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize)]
pub struct ApeFrame {
    pub frame_id: u64,
    pub timestamp: f64,
    pub translation_m: f64,
    pub rotation_deg: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ApeReport {
    pub frames: Vec<ApeFrame>,
    pub mean_translation_m: f64,
    pub mean_rotation_deg: f64,
}

/// Per-frame absolute pose error of `estimated` against `truth`, matched by
/// frame id (`truth` may cover more frames than were estimated).
pub fn compute_ape(
    estimated: &[StampedPose],
    truth: &[StampedPose],
) -> Result<ApeReport, EvalError> {
    if estimated.is_empty() {
        return Err(EvalError::EmptyTrajectory);
    }
    let by_id: BTreeMap<u64, &StampedPose> = truth.iter().map(|s| (s.frame_id, s)).collect();
    let mut frames = Vec::with_capacity(estimated.len());
    for est in estimated {
        let gt = by_id
            .get(&est.frame_id)
            .ok_or(EvalError::LengthMismatch {
                frame_id: est.frame_id,
            })?;
        frames.push(ApeFrame {
            frame_id: est.frame_id,
            timestamp: est.timestamp,
            translation_m: (est.pose.translation - gt.pose.translation).norm(),
            rotation_deg: est.pose.rotation.angle_to(&gt.pose.rotation).to_degrees(),
        });
    }
    let n = frames.len() as f64;
    Ok(ApeReport {
        mean_translation_m: frames.iter().map(|f| f.translation_m).sum::<f64>() / n,
        mean_rotation_deg: frames.iter().map(|f| f.rotation_deg).sum::<f64>() / n,
        frames,
    })
}

/// Everything one evaluated run contributes to a report.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub label: String,
    pub ape: ApeReport,
    /// May be empty (timing is optional and excluded from determinism).
    pub timing: Vec<FrameTiming>,
    pub estimated: Vec<StampedPose>,
    pub truth: Vec<StampedPose>,
}

#[derive(Serialize)]
struct LabeledApe<'a> {
    label: &'a str,
    #[serde(flatten)]
    ape: &'a ApeReport,
}

#[derive(Serialize)]
struct ApeJson<'a> {
    runs: Vec<LabeledApe<'a>>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 { 0.0 } else { sum / n as f64 }
}

/// Writes `ape.csv`, `ape.json`, `timing.csv`, `map.svg`, and
/// `trajectory.svg` into `dir`. Fails before touching the filesystem when
/// there is nothing to report.
pub fn emit_report(
    records: &[RunRecord],
    line_map: Option<&LineCloudMap>,
    dir: &Path,
) -> Result<(), EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    std::fs::create_dir_all(dir)?;

    let mut ape_csv = String::from("label,frames,mean_translation_m,mean_rotation_deg\n");
    for r in records {
        let _ = writeln!(
            ape_csv,
            "{},{},{},{}",
            r.label,
            r.ape.frames.len(),
            r.ape.mean_translation_m,
            r.ape.mean_rotation_deg
        );
    }
    std::fs::write(dir.join("ape.csv"), ape_csv)?;

    let json = ApeJson {
        runs: records
            .iter()
            .map(|r| LabeledApe {
                label: &r.label,
                ape: &r.ape,
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&json).expect("ape report serializes");
    std::fs::write(dir.join("ape.json"), text + "\n")?;

    let mut timing_csv =
        String::from("label,frames,mean_match_ms,mean_motion_ba_ms,mean_total_ms\n");
    for r in records {
        let _ = writeln!(
            timing_csv,
            "{},{},{:.4},{:.4},{:.4}",
            r.label,
            r.timing.len(),
            mean(r.timing.iter().map(|t| t.match_ms)),
            mean(r.timing.iter().map(|t| t.motion_ba_ms)),
            mean(r.timing.iter().map(|t| t.total_ms)),
        );
    }
    std::fs::write(dir.join("timing.csv"), timing_csv)?;

    std::fs::write(dir.join("trajectory.svg"), trajectory_svg(records))?;
    std::fs::write(dir.join("map.svg"), map_svg(records, line_map))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// SVG rendering (top-down x/z projection)
// ---------------------------------------------------------------------------

struct Canvas {
    min_x: f64,
    min_z: f64,
    scale: f64,
    width: f64,
    height: f64,
}

impl Canvas {
    /// Fits the bounding box of `points` into a fixed-width canvas with a
    /// 5% margin.
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Canvas {
        let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut min_z, mut max_z) = (f64::INFINITY, f64::NEG_INFINITY);
        for (x, z) in points {
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_z = min_z.min(z);
            max_z = max_z.max(z);
        }
        if !min_x.is_finite() {
            (min_x, max_x, min_z, max_z) = (0.0, 1.0, 0.0, 1.0);
        }
        let pad_x = 0.05 * (max_x - min_x).max(1e-6);
        let pad_z = 0.05 * (max_z - min_z).max(1e-6);
        min_x -= pad_x;
        max_x += pad_x;
        min_z -= pad_z;
        max_z += pad_z;
        let width = 800.0;
        let scale = width / (max_x - min_x);
        let height = ((max_z - min_z) * scale).max(100.0);
        Canvas {
            min_x,
            min_z,
            scale,
            width,
            height,
        }
    }

    fn map(&self, x: f64, z: f64) -> (f64, f64) {
        (
            (x - self.min_x) * self.scale,
            self.height - (z - self.min_z) * self.scale,
        )
    }

    fn polyline(&self, points: impl Iterator<Item = (f64, f64)>, color: &str, width: f64) -> String {
        let coords: Vec<String> = points
            .map(|(x, z)| {
                let (u, v) = self.map(x, z);
                format!("{u:.2},{v:.2}")
            })
            .collect();
        if coords.len() < 2 {
            return String::new();
        }
        format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\"/>\n",
            coords.join(" ")
        )
    }

    fn dot(&self, x: f64, z: f64, color: &str, r: f64) -> String {
        let (u, v) = self.map(x, z);
        format!("<circle cx=\"{u:.2}\" cy=\"{v:.2}\" r=\"{r}\" fill=\"{color}\"/>\n")
    }

    fn open(&self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {:.0} {:.0}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
            self.width, self.height
        )
    }
}

/// Centers of a trajectory in the ground plane.
fn centers(poses: &[StampedPose]) -> impl Iterator<Item = (f64, f64)> + '_ {
    poses.iter().map(|s| {
        let c = s.pose.center();
        (c.x, c.z)
    })
}

const ESTIMATE_COLORS: [&str; 4] = ["#2ca02c", "#d62728", "#ff7f0e", "#9467bd"];

fn trajectory_svg(records: &[RunRecord]) -> String {
    let all = records
        .iter()
        .flat_map(|r| centers(&r.truth).chain(centers(&r.estimated)));
    let canvas = Canvas::fit(all);
    let mut svg = canvas.open();
    if let Some(first) = records.first() {
        svg += &canvas.polyline(centers(&first.truth), "black", 1.5);
    }
    for (i, r) in records.iter().enumerate() {
        let color = ESTIMATE_COLORS[i % ESTIMATE_COLORS.len()];
        svg += &canvas.polyline(centers(&r.estimated), color, 1.0);
        svg += &format!(
            "<text x=\"10\" y=\"{}\" fill=\"{color}\" font-size=\"14\">{}</text>\n",
            18 + 16 * i,
            r.label
        );
    }
    svg += &format!(
        "<text x=\"10\" y=\"{}\" fill=\"black\" font-size=\"14\">ground truth</text>\n",
        18 + 16 * records.len()
    );
    svg + "</svg>\n"
}

/// Clips an infinite line to a rectangle in the x/z plane; returns the two
/// segment endpoints, or none when the line misses the rectangle.
fn clip_line(
    base: (f64, f64),
    dir: (f64, f64),
    min: (f64, f64),
    max: (f64, f64),
) -> Option<((f64, f64), (f64, f64))> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for ((b, d), (lo, hi)) in [
        ((base.0, dir.0), (min.0, max.0)),
        ((base.1, dir.1), (min.1, max.1)),
    ] {
        if d.abs() < 1e-12 {
            if b < lo || b > hi {
                return None;
            }
            continue;
        }
        let (a, c) = ((lo - b) / d, (hi - b) / d);
        t0 = t0.max(a.min(c));
        t1 = t1.min(a.max(c));
    }
    if t0 >= t1 || !t0.is_finite() || !t1.is_finite() {
        return None;
    }
    Some((
        (base.0 + t0 * dir.0, base.1 + t0 * dir.1),
        (base.0 + t1 * dir.0, base.1 + t1 * dir.1),
    ))
}

fn map_svg(records: &[RunRecord], line_map: Option<&LineCloudMap>) -> String {
    let keyframe_centers: Vec<(f64, f64)> = line_map
        .map(|m| {
            m.keyframes
                .iter()
                .map(|k| {
                    let c = k.pose.center();
                    (c.x, c.z)
                })
                .collect()
        })
        .unwrap_or_default();
    let all = records
        .iter()
        .flat_map(|r| centers(&r.truth).chain(centers(&r.estimated)))
        .chain(keyframe_centers.iter().copied());
    let canvas = Canvas::fit(all);
    let (min, max) = (
        (canvas.min_x, canvas.min_z),
        (
            canvas.min_x + canvas.width / canvas.scale,
            canvas.min_z + canvas.height / canvas.scale,
        ),
    );
    let mut svg = canvas.open();
    if let Some(m) = line_map {
        for line in &m.lines {
            let clipped = clip_line(
                (line.base.x, line.base.z),
                (line.direction.x, line.direction.z),
                min,
                max,
            );
            if let Some((a, b)) = clipped {
                let (u0, v0) = canvas.map(a.0, a.1);
                let (u1, v1) = canvas.map(b.0, b.1);
                svg += &format!(
                    "<line x1=\"{u0:.2}\" y1=\"{v0:.2}\" x2=\"{u1:.2}\" y2=\"{v1:.2}\" \
                     stroke=\"#1f77b4\" stroke-width=\"0.4\" stroke-opacity=\"0.35\"/>\n"
                );
            }
        }
        for (x, z) in &keyframe_centers {
            svg += &canvas.dot(*x, *z, "#2ca02c", 2.5);
        }
    }
    if let Some(first) = records.first() {
        svg += &canvas.polyline(centers(&first.truth), "black", 1.5);
        svg += &canvas.polyline(centers(&first.estimated), "#d62728", 1.2);
    }
    svg + "</svg>\n"
}
