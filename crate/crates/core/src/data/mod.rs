//! Bounding-box tracks, fixed-length observation/prediction windows and the
//! coordinate transforms the model consumes.

mod io;
mod split;
mod synth;

pub use io::{load_tracks, write_jsonl, DataFormat, FrameRecord};
pub use split::{split_dataset, DatasetSplit, SplitManifest, SplitSpec};
pub use synth::{generate_synthetic, Motion, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A pixel-space box in center/size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite field in {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "width and height must be positive, got w={} h={}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            cx: a[0],
            cy: a[1],
            w: a[2],
            h: a[3],
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `(x1, y1, x2, y2)`: upper-left and lower-right corners.
    pub fn to_corners(self) -> [f64; 4] {
        cxcywh_to_corners(self.to_array())
    }

    pub fn from_corners(c: [f64; 4]) -> Self {
        Self::from_array(corners_to_cxcywh(c))
    }
}

pub fn cxcywh_to_corners(b: [f64; 4]) -> [f64; 4] {
    let (hw, hh) = (b[2] / 2.0, b[3] / 2.0);
    [b[0] - hw, b[1] - hh, b[0] + hw, b[1] + hh]
}

pub fn corners_to_cxcywh(c: [f64; 4]) -> [f64; 4] {
    [
        (c[0] + c[2]) / 2.0,
        (c[1] + c[3]) / 2.0,
        c[2] - c[0],
        c[3] - c[1],
    ]
}

/// One pedestrian's annotation stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: String,
    pub video_id: String,
    pub frames: Vec<u64>,
    pub boxes: Vec<BoundingBox>,
    pub fps: f64,
}

impl Track {
    pub fn new(
        video_id: impl Into<String>,
        track_id: impl Into<String>,
        frames: Vec<u64>,
        boxes: Vec<BoundingBox>,
        fps: f64,
    ) -> Result<Self> {
        let t = Self {
            track_id: track_id.into(),
            video_id: video_id.into(),
            frames,
            boxes,
            fps,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.boxes.len() {
            return Err(Error::Config(format!(
                "track {}/{}: {} frames but {} boxes",
                self.video_id,
                self.track_id,
                self.frames.len(),
                self.boxes.len()
            )));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Config(format!(
                "track {}/{}: fps must be positive",
                self.video_id, self.track_id
            )));
        }
        if self.frames.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Config(format!(
                "track {}/{}: frames must be strictly increasing",
                self.video_id, self.track_id
            )));
        }
        self.boxes.iter().try_for_each(BoundingBox::validate)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Index ranges of maximal runs of consecutive frames.
    pub fn contiguous_segments(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.frames.len() {
            if i == self.frames.len() || self.frames[i] != self.frames[i - 1] + 1 {
                if i > start {
                    out.push(start..i);
                }
                start = i;
            }
        }
        out
    }
}

/// Affine record mapping normalized rows back to pixels: `raw = norm * scale + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormTransform {
    pub offset: [f64; 4],
    pub scale: [f64; 4],
}

impl NormTransform {
    pub const IDENTITY: Self = Self {
        offset: [0.0; 4],
        scale: [1.0; 4],
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn forward(&self, raw: [f64; 4]) -> [f64; 4] {
        std::array::from_fn(|i| (raw[i] - self.offset[i]) / self.scale[i])
    }

    pub fn inverse(&self, norm: [f64; 4]) -> [f64; 4] {
        std::array::from_fn(|i| norm[i] * self.scale[i] + self.offset[i])
    }
}

/// An observed/future pair cut from one track. Rows are `[cx, cy, w, h]` in
/// the coordinate frame described by `transform`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryWindow {
    pub video_id: String,
    pub track_id: String,
    /// Frame index of the last observed box.
    pub frame: u64,
    pub observed: Vec<[f64; 4]>,
    pub future: Vec<[f64; 4]>,
    pub anchor: BoundingBox,
    pub transform: NormTransform,
}

impl TrajectoryWindow {
    pub fn obs_len(&self) -> usize {
        self.observed.len()
    }

    pub fn pred_len(&self) -> usize {
        self.future.len()
    }

    pub fn denormalize(&self) -> TrajectoryWindow {
        let t = self.transform;
        TrajectoryWindow {
            observed: self.observed.iter().map(|r| t.inverse(*r)).collect(),
            future: self.future.iter().map(|r| t.inverse(*r)).collect(),
            transform: NormTransform::IDENTITY,
            ..self.clone()
        }
    }

    /// Maps normalized rows (e.g. a prediction) into pixel space.
    pub fn to_pixels(&self, rows: &[[f64; 4]]) -> Vec<[f64; 4]> {
        rows.iter().map(|r| self.transform.inverse(*r)).collect()
    }
}

/// Cuts every contiguous segment of every track into windows.
pub fn window_tracks(
    tracks: &[Track],
    obs_len: usize,
    pred_len: usize,
    stride: usize,
) -> Vec<TrajectoryWindow> {
    assert!(obs_len >= 1 && pred_len >= 1 && stride >= 1);
    let span = obs_len + pred_len;
    let mut out = Vec::new();
    for track in tracks {
        for seg in track.contiguous_segments() {
            if seg.len() < span {
                continue;
            }
            let boxes = &track.boxes[seg.clone()];
            let frames = &track.frames[seg];
            for start in (0..=boxes.len() - span).step_by(stride) {
                let observed: Vec<[f64; 4]> = boxes[start..start + obs_len]
                    .iter()
                    .map(|b| b.to_array())
                    .collect();
                let future = boxes[start + obs_len..start + span]
                    .iter()
                    .map(|b| b.to_array())
                    .collect();
                out.push(TrajectoryWindow {
                    video_id: track.video_id.clone(),
                    track_id: track.track_id.clone(),
                    frame: frames[start + obs_len - 1],
                    anchor: boxes[start + obs_len - 1],
                    observed,
                    future,
                    transform: NormTransform::IDENTITY,
                });
            }
        }
    }
    out
}

/// Expresses a window as offsets from its anchor box, divided by the image
/// dimensions (`[W, H, W, H]`).
pub fn normalize_window(w: &TrajectoryWindow, image_w: f64, image_h: f64) -> TrajectoryWindow {
    assert!(image_w > 0.0 && image_h > 0.0);
    let raw = w.denormalize();
    let t = NormTransform {
        offset: w.anchor.to_array(),
        scale: [image_w, image_h, image_w, image_h],
    };
    TrajectoryWindow {
        observed: raw.observed.iter().map(|r| t.forward(*r)).collect(),
        future: raw.future.iter().map(|r| t.forward(*r)).collect(),
        transform: t,
        ..raw
    }
}

/// Future rows sampled at the `k` stage boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct StageGoalTargets {
    pub k: usize,
    pub goals: Vec<[f64; 4]>,
    /// 1-based step offsets into the future, `(j + 1) * rho / k`.
    pub times: Vec<usize>,
}

/// Checks `1 <= k <= rho` and `k | rho`.
pub fn check_stage_count(rho: usize, k: usize) -> Result<()> {
    if k == 0 || k > rho {
        return Err(Error::Config(format!(
            "stage count k={k} must lie in [1, {rho}]"
        )));
    }
    if rho % k != 0 {
        return Err(Error::Config(format!(
            "stage count k={k} does not divide the prediction length {rho}"
        )));
    }
    Ok(())
}

pub fn stage_goal_targets(future: &[[f64; 4]], k: usize) -> Result<StageGoalTargets> {
    let rho = future.len();
    check_stage_count(rho, k)?;
    let spacing = rho / k;
    let times: Vec<usize> = (1..=k).map(|j| j * spacing).collect();
    let goals = times.iter().map(|&t| future[t - 1]).collect();
    Ok(StageGoalTargets { k, goals, times })
}

/// Horizon steps for the reported 0.5 s / 1.0 s / 1.5 s columns that fit in
/// `pred_len` at `fps`.
pub fn horizon_steps(pred_len: usize, fps: f64) -> Vec<(f64, usize)> {
    [0.5, 1.0, 1.5]
        .into_iter()
        .map(|s| (s, (s * fps).round() as usize))
        .filter(|&(_, n)| n >= 1 && n <= pred_len)
        .collect()
}
