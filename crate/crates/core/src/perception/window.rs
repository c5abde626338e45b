use super::{FeatureVector, PerceptionError};
#[cfg(test)]
use super::FeatureSource;

/// Per-frame image features: one global vector and any number of region vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub ts_ns: u64,
    pub global: FeatureVector,
    pub regions: Vec<FeatureVector>,
}

/// Time-ordered feature inputs for window assembly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureStreams {
    pub action: Vec<(u64, FeatureVector)>,
    pub frames: Vec<FrameFeatures>,
    pub sound: Vec<(u64, FeatureVector)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub t_start_ns: u64,
    pub t_end_ns: u64,
    pub action_feature: FeatureVector,
    pub global_feature: FeatureVector,
    pub region_features: Vec<FeatureVector>,
    pub sound_feature: Option<FeatureVector>,
}

/// A window position; `Absent` when the window holds no usable entries.
#[derive(Debug, Clone, PartialEq)]
pub enum WindowSlot {
    Present(WindowSample),
    Absent { t_start_ns: u64, t_end_ns: u64 },
}

impl WindowSlot {
    pub fn bounds(&self) -> (u64, u64) {
        match self {
            WindowSlot::Present(w) => (w.t_start_ns, w.t_end_ns),
            WindowSlot::Absent {
                t_start_ns,
                t_end_ns,
            } => (*t_start_ns, *t_end_ns),
        }
    }

    pub fn sample(&self) -> Option<&WindowSample> {
        match self {
            WindowSlot::Present(w) => Some(w),
            WindowSlot::Absent { .. } => None,
        }
    }
}

fn seconds_to_ns(s: f64, what: &str) -> Result<u64, PerceptionError> {
    if !(s.is_finite() && s > 0.0) {
        return Err(PerceptionError::InvalidParameter(format!("{what} must be positive, got {s}")));
    }
    Ok((s * 1e9).round() as u64)
}

fn check_ordered<T>(items: &[T], ts: impl Fn(&T) -> u64, what: &'static str) -> Result<(), PerceptionError> {
    if items.windows(2).any(|w| ts(&w[0]) > ts(&w[1])) {
        return Err(PerceptionError::InvalidParameter(format!("{what} entries are not time-ordered")));
    }
    Ok(())
}

/// Last element whose timestamp lies in `[lo, hi]`. Input is time-ordered.
fn last_in<T>(items: &[T], ts: impl Fn(&T) -> u64, lo: u64, hi: u64) -> Option<&T> {
    let end = items.partition_point(|x| ts(x) <= hi);
    items[..end].last().filter(|x| ts(x) >= lo)
}

/// Slides a `k`-second window at `stride` seconds over the streams.
///
/// Windows start at the first timestamp and continue until one reaches the
/// last timestamp. Each present window takes its features from the last
/// entries inside `[t_start, t_end]`; the last frame is the representative
/// frame. A window without an action feature or a frame is `Absent`.
pub fn assemble_windows(
    streams: &FeatureStreams,
    k_s: f64,
    stride_s: f64,
) -> Result<Vec<WindowSlot>, PerceptionError> {
    let k = seconds_to_ns(k_s, "window length")?;
    let stride = seconds_to_ns(stride_s, "stride")?;
    check_ordered(&streams.action, |e| e.0, "action")?;
    check_ordered(&streams.frames, |f| f.ts_ns, "frame")?;
    check_ordered(&streams.sound, |e| e.0, "sound")?;

    let all_ts = streams
        .action
        .iter()
        .map(|e| e.0)
        .chain(streams.frames.iter().map(|f| f.ts_ns))
        .chain(streams.sound.iter().map(|e| e.0));
    let (first, last) = all_ts.fold(None, |acc: Option<(u64, u64)>, t| match acc {
        None => Some((t, t)),
        Some((lo, hi)) => Some((lo.min(t), hi.max(t))),
    })
    .ok_or(PerceptionError::Empty("feature streams"))?;

    let span = last - first;
    let count = if span <= k { 1 } else { (span - k).div_ceil(stride) + 1 };

    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let t_start = first + i * stride;
        let t_end = t_start + k;
        let action = last_in(&streams.action, |e| e.0, t_start, t_end);
        let frame = last_in(&streams.frames, |f| f.ts_ns, t_start, t_end);
        let slot = match (action, frame) {
            (Some((_, a)), Some(f)) => WindowSlot::Present(WindowSample {
                t_start_ns: t_start,
                t_end_ns: t_end,
                action_feature: a.clone(),
                global_feature: f.global.clone(),
                region_features: f.regions.clone(),
                sound_feature: last_in(&streams.sound, |e| e.0, t_start, t_end).map(|e| e.1.clone()),
            }),
            _ => WindowSlot::Absent {
                t_start_ns: t_start,
                t_end_ns: t_end,
            },
        };
        out.push(slot);
    }
    Ok(out)
}
