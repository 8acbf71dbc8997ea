//! Raster plots of observed, ground-truth and predicted trajectories.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_rect_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

use crate::data::{horizon_steps, TrajectoryWindow};
use crate::error::{Error, Result};

pub const PAST: Rgb<u8> = Rgb([31, 119, 180]);
pub const TRUTH: Rgb<u8> = Rgb([255, 127, 14]);
pub const PREDICTION: Rgb<u8> = Rgb([44, 160, 44]);
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const FRAME: Rgb<u8> = Rgb([90, 90, 90]);

#[derive(Debug, Clone, Copy)]
pub struct PlotConfig {
    pub width: u32,
    pub height: u32,
    pub margin: f64,
    pub fps: f64,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            margin: 40.0,
            fps: 30.0,
        }
    }
}

/// Pixel-to-canvas transform fitting every box of one sample with a margin,
/// preserving aspect ratio.
struct View {
    x0: f64,
    y0: f64,
    s: f64,
    ox: f64,
    oy: f64,
}

impl View {
    fn fit(rows: &[[f64; 4]], cfg: &PlotConfig) -> Self {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for r in rows {
            x0 = x0.min(r[0] - r[2] / 2.0);
            y0 = y0.min(r[1] - r[3] / 2.0);
            x1 = x1.max(r[0] + r[2] / 2.0);
            y1 = y1.max(r[1] + r[3] / 2.0);
        }
        let (w, h) = ((x1 - x0).max(1.0), (y1 - y0).max(1.0));
        let (aw, ah) = (cfg.width as f64 - 2.0 * cfg.margin, cfg.height as f64 - 2.0 * cfg.margin);
        let s = (aw / w).min(ah / h);
        Self {
            x0,
            y0,
            s,
            ox: cfg.margin + (aw - w * s) / 2.0,
            oy: cfg.margin + (ah - h * s) / 2.0,
        }
    }

    fn point(&self, x: f64, y: f64) -> (f32, f32) {
        (
            (self.ox + (x - self.x0) * self.s) as f32,
            (self.oy + (y - self.y0) * self.s) as f32,
        )
    }

    fn rect(&self, r: [f64; 4]) -> Option<Rect> {
        let (x, y) = self.point(r[0] - r[2] / 2.0, r[1] - r[3] / 2.0);
        let (w, h) = ((r[2] * self.s).round() as u32, (r[3] * self.s).round() as u32);
        (w > 0 && h > 0).then(|| Rect::at(x.round() as i32, y.round() as i32).of_size(w, h))
    }
}

fn polyline(img: &mut RgbImage, view: &View, rows: &[[f64; 4]], color: Rgb<u8>) {
    for pair in rows.windows(2) {
        let a = view.point(pair[0][0], pair[0][1]);
        let b = view.point(pair[1][0], pair[1][1]);
        draw_line_segment_mut(img, a, b, color);
        draw_line_segment_mut(img, (a.0, a.1 + 1.0), (b.0, b.1 + 1.0), color);
    }
}

/// Legend swatches in the top-left corner: past, ground truth, prediction.
fn legend(img: &mut RgbImage) {
    for (i, c) in [PAST, TRUTH, PREDICTION].into_iter().enumerate() {
        let y = 8 + 16 * i as i32;
        draw_filled_rect_mut(img, Rect::at(8, y).of_size(24, 10), c);
        draw_hollow_rect_mut(img, Rect::at(8, y).of_size(24, 10), FRAME);
    }
}

/// Renders one sample; all rows in pixels.
pub fn render(
    observed: &[[f64; 4]],
    truth: &[[f64; 4]],
    pred: &[[f64; 4]],
    cfg: &PlotConfig,
) -> RgbImage {
    let mut img = RgbImage::from_pixel(cfg.width, cfg.height, BACKGROUND);
    let all: Vec<[f64; 4]> = observed.iter().chain(truth).chain(pred).copied().collect();
    let view = View::fit(&all, cfg);
    for (_, step) in horizon_steps(truth.len(), cfg.fps) {
        for (rows, color) in [(truth, TRUTH), (pred, PREDICTION)] {
            if let Some(r) = rows.get(step - 1).and_then(|r| view.rect(*r)) {
                draw_hollow_rect_mut(&mut img, r, color);
            }
        }
    }
    let last = observed.last().copied();
    let join = |rows: &[[f64; 4]]| -> Vec<[f64; 4]> { last.into_iter().chain(rows.iter().copied()).collect() };
    polyline(&mut img, &view, observed, PAST);
    polyline(&mut img, &view, &join(truth), TRUTH);
    polyline(&mut img, &view, &join(pred), PREDICTION);
    legend(&mut img);
    img
}

fn file_name(i: usize, w: &TrajectoryWindow) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect()
    };
    format!("{i:04}_{}_{}_{}.png", clean(&w.video_id), clean(&w.track_id), w.frame)
}

/// One PNG per window; `pred` holds normalized rows matching `windows`.
pub fn plot_trajectories(
    windows: &[TrajectoryWindow],
    pred: &[Vec<[f64; 4]>],
    out_dir: &Path,
    cfg: &PlotConfig,
) -> Result<Vec<PathBuf>> {
    if windows.len() != pred.len() {
        return Err(Error::Mismatch(format!(
            "{} predictions for {} samples",
            pred.len(),
            windows.len()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::with_capacity(windows.len());
    for (i, (w, p)) in windows.iter().zip(pred).enumerate() {
        if p.len() != w.future.len() {
            return Err(Error::Mismatch(format!(
                "sample {i}: {} predicted steps for {} future steps",
                p.len(),
                w.future.len()
            )));
        }
        let img = render(
            &w.to_pixels(&w.observed),
            &w.to_pixels(&w.future),
            &w.to_pixels(p),
            cfg,
        );
        let path = out_dir.join(file_name(i, w));
        img.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BoundingBox, NormTransform};

    fn window(id: &str) -> TrajectoryWindow {
        let row = |t: f64| [100.0 + 3.0 * t, 200.0 + t, 30.0, 66.0];
        TrajectoryWindow {
            video_id: id.into(),
            track_id: "p/1".into(),
            frame: 14,
            observed: (0..15).map(|t| row(t as f64)).collect(),
            future: (15..60).map(|t| row(t as f64)).collect(),
            anchor: BoundingBox::from_array(row(14.0)),
            transform: NormTransform::IDENTITY,
        }
    }

    #[test]
    fn zero_samples_zero_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(plot_trajectories(&[], &[], dir.path(), &PlotConfig::default()).unwrap().is_empty());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn one_file_per_sample() {
        let dir = tempfile::tempdir().unwrap();
        let ws: Vec<_> = ["a", "b", "c"].iter().map(|v| window(v)).collect();
        let preds: Vec<_> = ws.iter().map(|w| w.future.clone()).collect();
        let paths = plot_trajectories(&ws, &preds, dir.path(), &PlotConfig::default()).unwrap();
        let names: Vec<_> = paths.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
        assert_eq!(names, vec!["0000_a_p_1_14.png", "0001_b_p_1_14.png", "0002_c_p_1_14.png"]);
        assert!(paths.iter().all(|p| p.is_file()));
    }

    #[test]
    fn unmatched_records() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            plot_trajectories(&[window("a")], &[], dir.path(), &PlotConfig::default()),
            Err(Error::Mismatch(_))
        ));
    }
}
