use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::{entries_or_empty, AnalyticsError};
use crate::memory3d::{CameraModel, TrackStatus};
use crate::stream_bus::{topics, Bus, Payload};

/// Gaze target distance along the ray when there is no scene geometry.
pub const DEFAULT_GAZE_DEPTH_M: f64 = 1.5;

/// Row-major depth in meters (0 = invalid) with optional RGB8 pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub depth: Vec<f32>,
    pub rgb: Option<Vec<u8>>,
    pub camera: CameraModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudPoint {
    pub xyz: [f64; 3],
    pub rgb: Option<[u8; 3]>,
}

/// Unprojects every `stride`-th pixel (both axes) with a positive finite
/// depth through its frame's pose; frames are concatenated in world space.
pub fn build_point_cloud(frames: &[DepthFrame], stride_px: usize) -> Result<Vec<CloudPoint>, AnalyticsError> {
    if stride_px == 0 {
        return Err(AnalyticsError::ZeroStride);
    }
    let mut out = Vec::new();
    for f in frames {
        let (w, h) = (f.camera.width as usize, f.camera.height as usize);
        if f.depth.len() != w * h {
            return Err(AnalyticsError::SizeMismatch { expected: w * h, got: f.depth.len() });
        }
        if let Some(rgb) = &f.rgb {
            if rgb.len() != w * h * 3 {
                return Err(AnalyticsError::SizeMismatch { expected: w * h * 3, got: rgb.len() });
            }
        }
        for v in (0..h).step_by(stride_px) {
            for u in (0..w).step_by(stride_px) {
                let i = v * w + u;
                let d = f.depth[i] as f64;
                if !(d.is_finite() && d > 0.0) {
                    continue;
                }
                let p = f.camera.unproject(u as f64, v as f64, d);
                out.push(CloudPoint {
                    xyz: [p.x, p.y, p.z],
                    rgb: f.rgb.as_ref().map(|c| [c[3 * i], c[3 * i + 1], c[3 * i + 2]]),
                });
            }
        }
    }
    Ok(out)
}

/// ASCII PLY with `x y z r g b` per vertex; points without color are grey.
pub fn point_cloud_ply(points: &[CloudPoint]) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n");
    for p in points {
        let [r, g, b] = p.rgb.unwrap_or([128, 128, 128]);
        let _ = writeln!(s, "{} {} {} {r} {g} {b}", p.xyz[0], p.xyz[1], p.xyz[2]);
    }
    s
}

fn f32_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Depth frames of a session paired with the latest pose at or before each
/// frame and an RGB frame sharing its timestamp. Frames with no pose or a
/// missing blob are skipped.
pub fn depth_frames_from_bus(bus: &Bus) -> Vec<DepthFrame> {
    let mut out = Vec::new();
    for e in entries_or_empty(bus, topics::DEPTH) {
        let Payload::DepthFrameRef(fr) = &e.payload else { continue };
        let Some(bytes) = bus.blob(&fr.blob) else { continue };
        let Some(camera) = latest_pose(bus, e.ts_ns) else { continue };
        if camera.width != fr.width || camera.height != fr.height {
            continue;
        }
        let rgb = entries_or_empty(bus, topics::RGB).into_iter().find_map(|r| match &r.payload {
            Payload::RgbFrameRef(c) if r.ts_ns == e.ts_ns && c.width == fr.width && c.height == fr.height => {
                bus.blob(&c.blob).map(|b| b.to_vec())
            }
            _ => None,
        });
        out.push(DepthFrame { depth: f32_le(&bytes), rgb, camera });
    }
    out
}

fn latest_pose(bus: &Bus, ts: u64) -> Option<CameraModel> {
    let snap = bus.snapshot_latest(&[topics::POSE], ts).ok()?;
    match snap.into_values().next()??.payload.clone() {
        Payload::CameraPose(c) => Some(c),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeRay {
    pub ts_ns: u64,
    pub origin: [f64; 3],
    /// Unit direction in world coordinates.
    pub direction: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DwellCell {
    /// Integer cell coordinates: `floor(p / cell_m)` per axis.
    pub cell: [i64; 3],
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeDwell {
    pub rays: Vec<GazeRay>,
    pub dwell: Vec<DwellCell>,
    pub notices: Vec<String>,
}

/// One world ray per gaze sample (camera-frame direction rotated by the
/// latest pose at or before it). The time until the next ray accrues to the
/// cell holding this ray's target point `origin + direction * target_depth_m`.
pub fn gaze_dwell(
    poses: &[(u64, CameraModel)],
    gaze: &[(u64, [f64; 3])],
    cell_m: f64,
    target_depth_m: f64,
) -> Result<GazeDwell, AnalyticsError> {
    if !(cell_m > 0.0 && cell_m.is_finite()) {
        return Err(AnalyticsError::CellSize);
    }
    let mut rays = Vec::new();
    let mut notices = Vec::new();
    for &(ts, dir) in gaze {
        let d = Vector3::from(dir);
        let n = d.norm();
        if !(n > 0.0 && n.is_finite()) {
            notices.push(format!("gaze sample at {ts} has a zero direction; skipped"));
            continue;
        }
        let idx = poses.partition_point(|(t, _)| *t <= ts);
        let Some((_, cam)) = idx.checked_sub(1).map(|i| &poses[i]) else {
            notices.push(format!("gaze sample at {ts} precedes every pose; skipped"));
            continue;
        };
        let world = cam.rotation_matrix() * (d / n);
        rays.push(GazeRay {
            ts_ns: ts,
            origin: cam.translation,
            direction: [world.x, world.y, world.z],
        });
    }
    let mut dwell: BTreeMap<[i64; 3], f64> = BTreeMap::new();
    for pair in rays.windows(2) {
        let (r, next) = (&pair[0], &pair[1]);
        let target = Point3::from(r.origin) + Vector3::from(r.direction) * target_depth_m;
        let cell = [
            (target.x / cell_m).floor() as i64,
            (target.y / cell_m).floor() as i64,
            (target.z / cell_m).floor() as i64,
        ];
        *dwell.entry(cell).or_default() += (next.ts_ns - r.ts_ns) as f64 * 1e-9;
    }
    Ok(GazeDwell {
        rays,
        dwell: dwell.into_iter().map(|(cell, seconds)| DwellCell { cell, seconds }).collect(),
        notices,
    })
}

/// Pose and gaze series of a session.
pub fn gaze_from_bus(bus: &Bus) -> (Vec<(u64, CameraModel)>, Vec<(u64, [f64; 3])>) {
    let poses = entries_or_empty(bus, topics::POSE)
        .iter()
        .filter_map(|e| match &e.payload {
            Payload::CameraPose(c) => Some((e.ts_ns, c.clone())),
            _ => None,
        })
        .collect();
    let gaze = entries_or_empty(bus, topics::GAZE)
        .iter()
        .filter_map(|e| match &e.payload {
            Payload::GazeSample(g) => Some((e.ts_ns, g.direction)),
            _ => None,
        })
        .collect();
    (poses, gaze)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub object_id: u64,
    pub class: String,
    pub status: TrackStatus,
    /// `(ts_ns, xyz)` polyline vertices.
    pub points: Vec<(u64, [f64; 3])>,
}

/// Object paths from the newest memory snapshot of the session.
pub fn trajectories(bus: &Bus) -> Vec<Trajectory> {
    let entries = entries_or_empty(bus, topics::MEMORY);
    let Some(Payload::MemorySnapshot(snap)) = entries.last().map(|e| &e.payload) else {
        return Vec::new();
    };
    snap.tracklets
        .iter()
        .map(|t| Trajectory {
            object_id: t.object_id,
            class: t.class.clone(),
            status: t.status,
            points: t.positions.iter().map(|p| (p.ts_ns, p.xyz)).collect(),
        })
        .collect()
}
