//! Pixel-space error metrics over predicted box sequences.
//!
//! Each argument is a slice of samples, each sample a sequence of
//! `[cx, cy, w, h]` rows in pixels.

use crate::data::cxcywh_to_corners;
use crate::error::{Error, Result};

type Rows = [Vec<[f64; 4]>];

fn check_pairs(pred: &Rows, truth: &Rows) -> Result<usize> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} ground-truth samples",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("no samples to score".into()));
    }
    let rho = truth[0].len();
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != rho || t.len() != rho {
            return Err(Error::Shape(format!(
                "sequence lengths {} and {} differ from {rho}",
                p.len(),
                t.len()
            )));
        }
    }
    Ok(rho)
}

/// Mean squared error over the corner coordinates `(x1, y1, x2, y2)` of the
/// first `horizon` steps of every sample.
pub fn mse_bbox(pred: &Rows, truth: &Rows, horizon: usize) -> Result<f64> {
    let rho = check_pairs(pred, truth)?;
    if horizon == 0 || horizon > rho {
        return Err(Error::Config(format!("horizon {horizon} outside 1..={rho}")));
    }
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        for s in 0..horizon {
            let (a, b) = (cxcywh_to_corners(p[s]), cxcywh_to_corners(t[s]));
            sum += (0..4).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
        }
    }
    Ok(sum / (pred.len() * horizon * 4) as f64)
}

fn centroid_mse(pred: &Rows, truth: &Rows, steps: std::ops::Range<usize>) -> f64 {
    let n = steps.len();
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        for s in steps.clone() {
            sum += (p[s][0] - t[s][0]).powi(2) + (p[s][1] - t[s][1]).powi(2);
        }
    }
    sum / (pred.len() * n * 2) as f64
}

/// Centroid MSE averaged over every step.
pub fn c_mse(pred: &Rows, truth: &Rows) -> Result<f64> {
    let rho = check_pairs(pred, truth)?;
    Ok(centroid_mse(pred, truth, 0..rho))
}

/// Centroid MSE at the final step only.
pub fn cf_mse(pred: &Rows, truth: &Rows) -> Result<f64> {
    let rho = check_pairs(pred, truth)?;
    Ok(centroid_mse(pred, truth, rho - 1..rho))
}
