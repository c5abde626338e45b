//! Episodic object memory in world coordinates.
//!
//! Detections are lifted to 3D with depth and the camera pose, then matched to
//! same-class tracklets within a radius. Objects that leave the view keep
//! their last position; an object that should be visible but goes unmatched
//! for several frames is marked as moved.

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perception::cosine_similarity;

#[derive(Debug, Error, PartialEq)]
pub enum MemoryError {
    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("bbox center ({u}, {v}) lies outside the image")]
    CenterOutsideImage { u: f64, v: f64 },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
    #[error("point lies behind the camera")]
    BehindCamera,
}

/// Pinhole intrinsics with a world-from-camera rigid pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Row-major 3x3 rotation, world from camera.
    pub rotation: [[f64; 3]; 3],
    /// Camera position in world coordinates, meters.
    pub translation: [f64; 3],
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn with_pose(mut self, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        for i in 0..3 {
            for j in 0..3 {
                self.rotation[i][j] = rotation[(i, j)];
            }
            self.translation[i] = translation[i];
        }
        self
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn validate(&self) -> Result<(), MemoryError> {
        let bad = |m: &str| Err(MemoryError::InvalidCamera(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("principal point outside image");
        }
        let r = self.rotation_matrix();
        if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-6 {
            return bad("rotation is not orthonormal");
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return bad("non-finite translation");
        }
        Ok(())
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// Back-projects pixel `(u, v)` at `depth` meters into world coordinates.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Point3<f64> {
        let cam = Vector3::new((u - self.cx) * depth / self.fx, (v - self.cy) * depth / self.fy, depth);
        Point3::from(self.rotation_matrix() * cam + self.translation_vector())
    }

    /// Projects a world point to `(u, v, depth)`.
    pub fn project(&self, p: &Point3<f64>) -> Result<(f64, f64, f64), MemoryError> {
        let cam = self.rotation_matrix().transpose() * (p.coords - self.translation_vector());
        if cam.z <= 0.0 {
            return Err(MemoryError::BehindCamera);
        }
        Ok((self.fx * cam.x / cam.z + self.cx, self.fy * cam.y / cam.z + self.cy, cam.z))
    }

    /// In front of the camera and inside the image bounds.
    pub fn sees(&self, p: &Point3<f64>) -> bool {
        matches!(self.project(p), Ok((u, v, _)) if self.in_image(u, v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection2D {
    pub class_label: String,
    pub confidence: f64,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl Detection2D {
    pub fn validate(&self, cam: &CameraModel) -> Result<(), MemoryError> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(MemoryError::InvalidDetection(format!("confidence {} out of range", self.confidence)));
        }
        let b = &self.bbox;
        if !(b.x >= 0.0 && b.y >= 0.0 && b.w >= 0.0 && b.h >= 0.0)
            || b.x + b.w > cam.width as f64
            || b.y + b.h > cam.height as f64
        {
            return Err(MemoryError::InvalidDetection("bbox outside image".into()));
        }
        Ok(())
    }
}

/// Median of the valid (positive, finite) depths in the 3x3 patch centered on
/// `(u, v)`. `depth` is row-major meters.
pub fn sample_depth(depth: &[f32], width: u32, height: u32, u: f64, v: f64) -> Option<f64> {
    let (cu, cv) = (u.floor() as i64, v.floor() as i64);
    let mut vals: Vec<f64> = Vec::with_capacity(9);
    for dv in -1..=1 {
        for du in -1..=1 {
            let (x, y) = (cu + du, cv + dv);
            if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
                continue;
            }
            let d = depth[(y as usize) * width as usize + x as usize] as f64;
            if d.is_finite() && d > 0.0 {
                vals.push(d);
            }
        }
    }
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(f64::total_cmp);
    let n = vals.len();
    Some(if n % 2 == 1 { vals[n / 2] } else { (vals[n / 2 - 1] + vals[n / 2]) / 2.0 })
}

/// World point of the detection's bbox center at `depth_m`.
pub fn project_to_world(det: &Detection2D, depth_m: f64, cam: &CameraModel) -> Result<Point3<f64>, MemoryError> {
    if !(depth_m > 0.0 && depth_m.is_finite()) {
        return Err(MemoryError::NonPositiveDepth(depth_m));
    }
    let (u, v) = det.bbox.center();
    if !cam.in_image(u, v) {
        return Err(MemoryError::CenterOutsideImage { u, v });
    }
    Ok(cam.unproject(u, v, depth_m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Visible,
    OutOfView,
    Moved,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub object_id: u64,
    pub object_class: String,
    pub positions: Vec<(u64, Point3<f64>)>,
    pub last_seen_ns: u64,
    pub status: TrackStatus,
    embedding: Option<Vec<f64>>,
    missed_in_view: u32,
}

impl Tracklet {
    pub fn last_position(&self) -> Point3<f64> {
        self.positions.last().expect("tracklets hold at least one position").1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MemoryEvent {
    Created { object_id: u64 },
    Updated { object_id: u64 },
    Moved { object_id: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryConfig {
    /// Match radius in meters.
    pub match_radius: f64,
    /// Consecutive in-view frames without a match before a tracklet is moved.
    pub moved_after: u32,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            match_radius: 0.3,
            moved_after: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionSample {
    pub ts_ns: u64,
    pub xyz: [f64; 3],
}

/// Serialized tracklet as published on the `memory3d` topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackletExport {
    pub object_id: u64,
    pub class: String,
    pub status: TrackStatus,
    pub positions: Vec<PositionSample>,
}

#[derive(Debug, Clone, Default)]
pub struct ObjectMemory {
    config: MemoryConfig,
    tracklets: Vec<Tracklet>,
    next_id: u64,
}

impl ObjectMemory {
    pub fn new(config: MemoryConfig) -> Self {
        ObjectMemory {
            config,
            tracklets: Vec::new(),
            next_id: 1,
        }
    }

    pub fn tracklets(&self) -> &[Tracklet] {
        &self.tracklets
    }

    pub fn get(&self, object_id: u64) -> Option<&Tracklet> {
        self.tracklets.iter().find(|t| t.object_id == object_id)
    }

    /// Folds one frame of detections into memory. Per-detection projection
    /// failures are returned alongside the events without aborting the batch.
    pub fn update(
        &mut self,
        detections: &[(Detection2D, f64)],
        cam: &CameraModel,
        ts_ns: u64,
    ) -> (Vec<MemoryEvent>, Vec<(usize, MemoryError)>) {
        let mut events = Vec::new();
        let mut errors = Vec::new();
        let mut matched = vec![false; self.tracklets.len()];

        for (i, (det, depth)) in detections.iter().enumerate() {
            let point = match det.validate(cam).and_then(|_| project_to_world(det, *depth, cam)) {
                Ok(p) => p,
                Err(e) => {
                    errors.push((i, e));
                    continue;
                }
            };
            match self.best_match(det, &point, &matched) {
                Some(idx) => {
                    matched[idx] = true;
                    let t = &mut self.tracklets[idx];
                    t.positions.push((ts_ns, point));
                    t.last_seen_ns = ts_ns;
                    t.status = TrackStatus::Visible;
                    t.missed_in_view = 0;
                    if det.embedding.is_some() {
                        t.embedding = det.embedding.clone();
                    }
                    events.push(MemoryEvent::Updated { object_id: t.object_id });
                }
                None => {
                    let id = self.next_id.max(1);
                    self.next_id = id + 1;
                    self.tracklets.push(Tracklet {
                        object_id: id,
                        object_class: det.class_label.clone(),
                        positions: vec![(ts_ns, point)],
                        last_seen_ns: ts_ns,
                        status: TrackStatus::Visible,
                        embedding: det.embedding.clone(),
                        missed_in_view: 0,
                    });
                    matched.push(true);
                    events.push(MemoryEvent::Created { object_id: id });
                }
            }
        }

        let moved_after = self.config.moved_after;
        for (t, was_matched) in self.tracklets.iter_mut().zip(&matched) {
            if *was_matched {
                continue;
            }
            if cam.sees(&t.last_position()) {
                t.missed_in_view += 1;
                if t.status == TrackStatus::OutOfView {
                    t.status = TrackStatus::Visible;
                }
                if t.missed_in_view >= moved_after && t.status != TrackStatus::Moved {
                    t.status = TrackStatus::Moved;
                    events.push(MemoryEvent::Moved { object_id: t.object_id });
                }
            } else {
                t.missed_in_view = 0;
                if t.status == TrackStatus::Visible {
                    t.status = TrackStatus::OutOfView;
                }
            }
        }
        (events, errors)
    }

    /// Nearest unmatched same-class tracklet within the radius. With several
    /// candidates and embeddings on both sides, the most similar embedding wins.
    fn best_match(&self, det: &Detection2D, point: &Point3<f64>, matched: &[bool]) -> Option<usize> {
        let candidates: Vec<(usize, f64)> = self
            .tracklets
            .iter()
            .enumerate()
            .filter(|(i, t)| !matched[*i] && t.object_class == det.class_label)
            .map(|(i, t)| (i, (t.last_position() - point).norm()))
            .filter(|(_, d)| *d <= self.config.match_radius)
            .collect();
        if candidates.len() > 1 {
            if let Some(q) = &det.embedding {
                let by_similarity = candidates
                    .iter()
                    .filter_map(|&(i, _)| {
                        let e = self.tracklets[i].embedding.as_ref()?;
                        (e.len() == q.len()).then(|| cosine_similarity(q, e)).flatten().map(|s| (i, s))
                    })
                    .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
                if let Some((i, _)) = by_similarity {
                    return Some(i);
                }
            }
        }
        candidates
            .into_iter()
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i)
    }

    /// Most recently seen tracklet of the class, regardless of visibility.
    /// Ties on `last_seen_ns` go to the one nearest `near`, then lowest id.
    pub fn locate_object(&self, class_label: &str, near: Option<&Point3<f64>>) -> Option<&Tracklet> {
        let dist = |t: &Tracklet| near.map_or(0.0, |p| (t.last_position() - p).norm());
        self.tracklets
            .iter()
            .filter(|t| t.object_class == class_label)
            .min_by(|a, b| {
                b.last_seen_ns
                    .cmp(&a.last_seen_ns)
                    .then(dist(a).total_cmp(&dist(b)))
                    .then(a.object_id.cmp(&b.object_id))
            })
    }

    pub fn export(&self) -> Vec<TrackletExport> {
        self.tracklets
            .iter()
            .map(|t| TrackletExport {
                object_id: t.object_id,
                class: t.object_class.clone(),
                status: t.status,
                positions: t
                    .positions
                    .iter()
                    .map(|(ts, p)| PositionSample {
                        ts_ns: *ts,
                        xyz: [p.x, p.y, p.z],
                    })
                    .collect(),
            })
            .collect()
    }
}
