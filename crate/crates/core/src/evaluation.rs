//! Pixel-space evaluation of trained models and reference predictors.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{horizon_steps, normalize_window, window_tracks, DatasetSplit, TrajectoryWindow};
use crate::error::{Error, Result};
use crate::metrics::{c_mse, cf_mse, mse_bbox};
use crate::model::{LatentMode, Mgnet};

/// Produces future rows in the frame of each window (normalized in, normalized out).
pub trait Predictor {
    fn name(&self) -> String;
    fn predict(&self, windows: &[TrajectoryWindow]) -> Result<Vec<Vec<[f64; 4]>>>;
}

/// Repeats the last observed per-step displacement.
pub struct ConstantVelocity;

impl Predictor for ConstantVelocity {
    fn name(&self) -> String {
        "constant-velocity".into()
    }

    fn predict(&self, windows: &[TrajectoryWindow]) -> Result<Vec<Vec<[f64; 4]>>> {
        Ok(windows
            .iter()
            .map(|w| {
                let tau = w.observed.len();
                let last = w.observed[tau - 1];
                let v: [f64; 4] = if tau > 1 {
                    std::array::from_fn(|c| last[c] - w.observed[tau - 2][c])
                } else {
                    [0.0; 4]
                };
                (1..=w.future.len())
                    .map(|s| std::array::from_fn(|c| last[c] + s as f64 * v[c]))
                    .collect()
            })
            .collect())
    }
}

/// Extrapolates a least-squares line fitted to each observed coordinate.
pub struct LinearFit;

impl Predictor for LinearFit {
    fn name(&self) -> String {
        "linear-fit".into()
    }

    fn predict(&self, windows: &[TrajectoryWindow]) -> Result<Vec<Vec<[f64; 4]>>> {
        Ok(windows
            .iter()
            .map(|w| {
                let n = w.observed.len() as f64;
                let t_mean = (n - 1.0) / 2.0;
                let stt: f64 = (0..w.observed.len()).map(|t| (t as f64 - t_mean).powi(2)).sum();
                let fit: [(f64, f64); 4] = std::array::from_fn(|c| {
                    let mean = w.observed.iter().map(|r| r[c]).sum::<f64>() / n;
                    let sty: f64 = w
                        .observed
                        .iter()
                        .enumerate()
                        .map(|(t, r)| (t as f64 - t_mean) * (r[c] - mean))
                        .sum();
                    let slope = if stt > 0.0 { sty / stt } else { 0.0 };
                    (mean - slope * t_mean, slope)
                });
                (0..w.future.len())
                    .map(|s| {
                        let t = n - 1.0 + (s + 1) as f64;
                        std::array::from_fn(|c| fit[c].0 + fit[c].1 * t)
                    })
                    .collect()
            })
            .collect())
    }
}

pub struct ModelPredictor<'a> {
    pub model: &'a Mgnet,
    pub batch_size: usize,
    pub mode: LatentMode,
    pub seed: u64,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a Mgnet) -> Self {
        Self {
            model,
            batch_size: 256,
            mode: LatentMode::PriorMean,
            seed: 0,
        }
    }
}

impl Predictor for ModelPredictor<'_> {
    fn name(&self) -> String {
        "mgnet".into()
    }

    fn predict(&self, windows: &[TrajectoryWindow]) -> Result<Vec<Vec<[f64; 4]>>> {
        self.model.predict_windows(windows, self.batch_size, self.mode, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub fps: f64,
    /// Steps scored by the centroid metrics; `None` means the full horizon.
    pub centroid_horizon: Option<usize>,
    /// Number of stochastic prior draws to average; 0 decodes the prior mean.
    pub samples: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fps: 30.0,
            centroid_horizon: None,
            samples: 0,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonMse {
    pub seconds: f64,
    pub steps: usize,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse_by_horizon: Vec<HorizonMse>,
    pub c_mse: f64,
    pub cf_mse: f64,
    pub sample_count: usize,
}

impl MetricReport {
    pub fn mse_at(&self, seconds: f64) -> Option<f64> {
        self.mse_by_horizon
            .iter()
            .find(|h| (h.seconds - seconds).abs() < 1e-9)
            .map(|h| h.mse)
    }

    /// MSE at the longest reported horizon.
    pub fn final_mse(&self) -> Option<f64> {
        self.mse_by_horizon.last().map(|h| h.mse)
    }
}

/// Scores normalized predictions against normalized windows in pixel space.
pub fn score(windows: &[TrajectoryWindow], pred: &[Vec<[f64; 4]>], cfg: &EvalConfig) -> Result<MetricReport> {
    if windows.len() != pred.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} windows",
            pred.len(),
            windows.len()
        )));
    }
    if windows.is_empty() {
        return Err(Error::Config("nothing to evaluate: the split is empty".into()));
    }
    let truth: Vec<Vec<[f64; 4]>> = windows.iter().map(|w| w.to_pixels(&w.future)).collect();
    let pred: Vec<Vec<[f64; 4]>> = windows.iter().zip(pred).map(|(w, p)| w.to_pixels(p)).collect();
    let rho = truth[0].len();
    let mse_by_horizon = horizon_steps(rho, cfg.fps)
        .into_iter()
        .map(|(seconds, steps)| {
            Ok(HorizonMse {
                seconds,
                steps,
                mse: mse_bbox(&pred, &truth, steps)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let h = cfg.centroid_horizon.unwrap_or(rho);
    if h == 0 || h > rho {
        return Err(Error::Config(format!("centroid horizon {h} outside 1..={rho}")));
    }
    let cut = |v: &[Vec<[f64; 4]>]| -> Vec<Vec<[f64; 4]>> { v.iter().map(|r| r[..h].to_vec()).collect() };
    let (pc, tc) = (cut(&pred), cut(&truth));
    Ok(MetricReport {
        mse_by_horizon,
        c_mse: c_mse(&pc, &tc)?,
        cf_mse: cf_mse(&pc, &tc)?,
        sample_count: windows.len(),
    })
}

pub fn evaluate_predictor(p: &dyn Predictor, windows: &[TrajectoryWindow], cfg: &EvalConfig) -> Result<MetricReport> {
    score(windows, &p.predict(windows)?, cfg)
}

/// Scores a model with prior-mean decoding, or averages `cfg.samples`
/// stochastic prior draws.
pub fn evaluate_model(model: &Mgnet, windows: &[TrajectoryWindow], cfg: &EvalConfig) -> Result<MetricReport> {
    let mut p = ModelPredictor::new(model);
    p.batch_size = cfg.batch_size;
    if cfg.samples == 0 {
        return evaluate_predictor(&p, windows, cfg);
    }
    p.mode = LatentMode::PriorSample;
    let reports = (0..cfg.samples as u64)
        .map(|s| {
            p.seed = s;
            evaluate_predictor(&p, windows, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    average_reports(&reports)
}

pub fn evaluate(checkpoint: &Path, windows: &[TrajectoryWindow], cfg: &EvalConfig) -> Result<MetricReport> {
    if !checkpoint.is_file() {
        return Err(Error::Checkpoint(format!("{} does not exist", checkpoint.display())));
    }
    let model = Checkpoint::load(checkpoint)?.build_model()?;
    evaluate_model(&model, windows, cfg)
}

/// Element-wise mean of reports over the same horizons.
pub fn average_reports(reports: &[MetricReport]) -> Result<MetricReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Config("no reports to average".into()))?;
    let n = reports.len() as f64;
    let mut out = first.clone();
    for (i, h) in out.mse_by_horizon.iter_mut().enumerate() {
        h.mse = 0.0;
        for r in reports {
            let other = r
                .mse_by_horizon
                .get(i)
                .filter(|o| o.steps == h.steps)
                .ok_or_else(|| Error::Mismatch("reports cover different horizons".into()))?;
            h.mse += other.mse / n;
        }
    }
    out.c_mse = reports.iter().map(|r| r.c_mse).sum::<f64>() / n;
    out.cf_mse = reports.iter().map(|r| r.cf_mse).sum::<f64>() / n;
    Ok(out)
}

/// Windows for each split: training windows strided, evaluation windows at
/// every start frame; all normalized by the image size.
#[derive(Debug, Clone)]
pub struct WindowSplits {
    pub train: Vec<TrajectoryWindow>,
    pub val: Vec<TrajectoryWindow>,
    pub test: Vec<TrajectoryWindow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub obs_len: usize,
    pub pred_len: usize,
    pub train_stride: usize,
    pub eval_stride: usize,
    pub image_w: f64,
    pub image_h: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            obs_len: 15,
            pred_len: 45,
            train_stride: 1,
            eval_stride: 1,
            image_w: 1920.0,
            image_h: 1080.0,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.obs_len < 1 || self.pred_len < 1 || self.train_stride < 1 || self.eval_stride < 1 {
            return Err(Error::Config("window lengths and strides must be positive".into()));
        }
        if !(self.image_w > 0.0 && self.image_h > 0.0) {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn windows(&self, tracks: &[crate::data::Track], stride: usize) -> Vec<TrajectoryWindow> {
        window_tracks(tracks, self.obs_len, self.pred_len, stride)
            .iter()
            .map(|w| normalize_window(w, self.image_w, self.image_h))
            .collect()
    }

    pub fn split_windows(&self, split: &DatasetSplit) -> WindowSplits {
        WindowSplits {
            train: self.windows(&split.train, self.train_stride),
            val: self.windows(&split.val, self.eval_stride),
            test: self.windows(&split.test, self.eval_stride),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct PredictionRecord<'a> {
    video_id: &'a str,
    track_id: &'a str,
    t: u64,
    horizon_step: usize,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

/// Writes one JSON line per predicted step, in pixels.
pub fn write_predictions(path: &Path, windows: &[TrajectoryWindow], pred: &[Vec<[f64; 4]>]) -> Result<()> {
    if windows.len() != pred.len() {
        return Err(Error::Shape("predictions and windows differ in count".into()));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (w, p) in windows.iter().zip(pred) {
        for (s, r) in w.to_pixels(p).into_iter().enumerate() {
            let rec = PredictionRecord {
                video_id: &w.video_id,
                track_id: &w.track_id,
                t: w.frame,
                horizon_step: s + 1,
                cx: r[0],
                cy: r[1],
                w: r[2],
                h: r[3],
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BoundingBox, NormTransform};

    fn window(obs: Vec<[f64; 4]>, fut: Vec<[f64; 4]>) -> TrajectoryWindow {
        TrajectoryWindow {
            video_id: "v".into(),
            track_id: "p".into(),
            frame: 0,
            anchor: BoundingBox::from_array(*obs.last().unwrap()),
            observed: obs,
            future: fut,
            transform: NormTransform::IDENTITY,
        }
    }

    fn line(start: [f64; 4], v: [f64; 4], from: usize, n: usize) -> Vec<[f64; 4]> {
        (from..from + n)
            .map(|t| std::array::from_fn(|c| start[c] + v[c] * t as f64))
            .collect()
    }

    #[test]
    fn baselines_exact_on_lines() {
        let (s, v) = ([100.0, 50.0, 20.0, 44.0], [2.0, -1.0, 0.1, 0.22]);
        let w = window(line(s, v, 0, 15), line(s, v, 15, 45));
        let cfg = EvalConfig::default();
        for p in [&ConstantVelocity as &dyn Predictor, &LinearFit] {
            let r = evaluate_predictor(p, std::slice::from_ref(&w), &cfg).unwrap();
            assert!(r.final_mse().unwrap() < 1e-18, "{}", p.name());
            assert!(r.c_mse < 1e-18 && r.cf_mse < 1e-18);
        }
    }

    #[test]
    fn horizon_keys_for_45_steps() {
        let w = window(vec![[0.0, 0.0, 1.0, 1.0]; 15], vec![[0.0, 0.0, 1.0, 1.0]; 45]);
        let r = evaluate_predictor(&ConstantVelocity, &[w], &EvalConfig::default()).unwrap();
        let secs: Vec<f64> = r.mse_by_horizon.iter().map(|h| h.seconds).collect();
        assert_eq!(secs, vec![0.5, 1.0, 1.5]);
        assert_eq!(r.mse_by_horizon.iter().map(|h| h.steps).collect::<Vec<_>>(), vec![15, 30, 45]);
    }

    #[test]
    fn averaging() {
        let mk = |v: f64| MetricReport {
            mse_by_horizon: vec![HorizonMse { seconds: 0.5, steps: 15, mse: v }],
            c_mse: v,
            cf_mse: 2.0 * v,
            sample_count: 3,
        };
        let r = average_reports(&[mk(1.0), mk(3.0)]).unwrap();
        assert_eq!((r.mse_at(0.5), r.c_mse, r.cf_mse), (Some(2.0), 2.0, 4.0));
        assert!(average_reports(&[]).is_err());
    }

    #[test]
    fn missing_checkpoint() {
        let w = window(vec![[0.0; 4]; 2], vec![[0.0; 4]; 2]);
        assert!(matches!(
            evaluate(Path::new("/no/such/model.safetensors"), &[w], &EvalConfig::default()),
            Err(Error::Checkpoint(_))
        ));
    }
}
