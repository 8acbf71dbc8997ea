#![allow(dead_code)]

//! Independent reference implementations and fixtures shared by the
//! integration tests.

use std::path::Path;

use candle_core::{DType, Tensor, Var};
use mgnet::data::{generate_synthetic, Motion, SynthConfig, Track};
use mgnet::encoder::AttentionConfig;
use mgnet::model::ModelConfig;
use mgnet::nn::{scalar_f64, tensor_from_f64, to_f64_vec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Seq = Vec<[f64; 4]>;

/// Corner MSE by explicit loops over samples, steps and the four corner
/// coordinates.
pub fn oracle_mse(pred: &[Seq], truth: &[Seq], horizon: usize) -> f64 {
    let corners = |r: [f64; 4]| {
        [
            r[0] - 0.5 * r[2],
            r[1] - 0.5 * r[3],
            r[0] + 0.5 * r[2],
            r[1] + 0.5 * r[3],
        ]
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..pred.len() {
        for s in 0..horizon {
            let (a, b) = (corners(pred[i][s]), corners(truth[i][s]));
            for c in 0..4 {
                let d = a[c] - b[c];
                total += d * d;
                count += 1;
            }
        }
    }
    total / count as f64
}

pub fn oracle_centroid(pred: &[Seq], truth: &[Seq], steps: std::ops::Range<usize>) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..pred.len() {
        for s in steps.clone() {
            for c in 0..2 {
                let d = pred[i][s][c] - truth[i][s][c];
                total += d * d;
                count += 1;
            }
        }
    }
    total / count as f64
}

pub fn random_sequences(rng: &mut ChaCha8Rng, n: usize, rho: usize) -> Vec<Seq> {
    (0..n)
        .map(|_| {
            (0..rho)
                .map(|_| {
                    [
                        rng.random_range(0.0..1920.0),
                        rng.random_range(0.0..1080.0),
                        rng.random_range(5.0..200.0),
                        rng.random_range(10.0..400.0),
                    ]
                })
                .collect()
        })
        .collect()
}

/// `KL(N(mq, sq²) || N(mp, sp²))` by composite Simpson quadrature of
/// `q(x) (log q(x) - log p(x))` over `mq ± 12 sq`.
pub fn kl_quadrature(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    let n = 20_000usize;
    let (a, b) = (mq - 12.0 * sq, mq + 12.0 * sq);
    let h = (b - a) / n as f64;
    let ln_norm = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let f = |x: f64| {
        let lq = -0.5 * ((x - mq) / sq).powi(2) - sq.ln() - ln_norm;
        let lp = -0.5 * ((x - mp) / sp).powi(2) - sp.ln() - ln_norm;
        lq.exp() * (lq - lp)
    };
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Worst agreement statistic of a central-difference check: the largest
/// `|fd - ad| / (rtol * max(|fd|, |ad|) + atol)` over the probed entries,
/// so values `<= 1` pass.
pub struct GradCheck {
    pub worst_ratio: f64,
    /// Largest relative error among entries with `max(|fd|, |ad|) >= 1e-6`.
    pub worst_rel: f64,
    pub max_abs_grad: f64,
    pub nonzero: usize,
    pub probed: usize,
    pub worst_name: String,
}

pub fn finite_difference_check(
    vars: &[(String, Var)],
    loss: &dyn Fn() -> Tensor,
    step: f64,
    rtol: f64,
    atol: f64,
    per_var: usize,
) -> GradCheck {
    let grads = loss().backward().unwrap();
    let mut out = GradCheck {
        worst_ratio: 0.0,
        worst_rel: 0.0,
        max_abs_grad: 0.0,
        nonzero: 0,
        probed: 0,
        worst_name: String::new(),
    };
    for (name, var) in vars {
        let base = to_f64_vec(var.as_tensor()).unwrap();
        let ad = grads
            .get(var)
            .map(|g| to_f64_vec(g).unwrap())
            .unwrap_or_else(|| vec![0.0; base.len()]);
        let stride = (base.len() / per_var).max(1);
        for i in (0..base.len()).step_by(stride).take(per_var) {
            let eval_at = |v: f64| {
                let mut vals = base.clone();
                vals[i] = v;
                var.set(&tensor_from_f64(vals, var.dims(), DType::F64).unwrap()).unwrap();
                scalar_f64(&loss()).unwrap()
            };
            let fd = (eval_at(base[i] + step) - eval_at(base[i] - step)) / (2.0 * step);
            var.set(&tensor_from_f64(base.clone(), var.dims(), DType::F64).unwrap()).unwrap();
            let diff = (fd - ad[i]).abs();
            let scale = fd.abs().max(ad[i].abs());
            let ratio = diff / (rtol * scale + atol);
            if ratio > out.worst_ratio {
                out.worst_ratio = ratio;
                out.worst_name = format!("{name}[{i}] fd={fd:.6e} ad={:.6e}", ad[i]);
            }
            if scale >= 1e-6 {
                out.worst_rel = out.worst_rel.max(diff / scale);
                out.nonzero += 1;
            }
            out.max_abs_grad = out.max_abs_grad.max(ad[i].abs());
            out.probed += 1;
        }
    }
    out
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    tensor_from_f64(v, shape, DType::F64).unwrap()
}

/// A model small enough for exhaustive or finite-difference checks.
pub fn tiny_model_config(obs_len: usize, pred_len: usize, goals: usize) -> ModelConfig {
    ModelConfig {
        obs_len,
        pred_len,
        goals,
        hidden_dim: 6,
        latent_dim: 3,
        box_embed_dim: 4,
        attention: AttentionConfig {
            embed_dim: 4,
            num_heads: 2,
            num_layers: 1,
            ff_dim: 8,
            output_dim: 5,
            positional: true,
        },
        ..Default::default()
    }
}

pub fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|k| n % k == 0).collect()
}

/// Index of the coarse stage covering fine time `t`, from the spacing
/// `ceil(rho / 3)`.
pub fn oracle_coarse_stage(t: usize, rho: usize) -> usize {
    let spacing = rho.div_ceil(3);
    t.div_ceil(spacing).min(3) - 1
}

/// Goal feature guiding decode step `s` (1-based): stage `ceil(s k / rho)`.
pub fn oracle_decode_goal(s: usize, rho: usize, k: usize) -> usize {
    (s * k).div_ceil(rho) - 1
}

/// Writes one CVAT-style annotation file per video from pixel tracks.
pub fn write_cvat_fixture(dir: &Path, tracks: &[Track]) {
    std::fs::create_dir_all(dir).unwrap();
    let mut by_video: std::collections::BTreeMap<&str, Vec<&Track>> = Default::default();
    for t in tracks {
        by_video.entry(t.video_id.as_str()).or_default().push(t);
    }
    for (video, ts) in by_video {
        let mut xml = String::from("<?xml version=\"1.0\" encoding=\"utf-8\"?>\n<annotations>\n");
        for t in ts {
            xml.push_str("  <track label=\"pedestrian\">\n");
            for (f, b) in t.frames.iter().zip(&t.boxes) {
                let c = b.to_corners();
                xml.push_str(&format!(
                    "    <box frame=\"{f}\" keyframe=\"1\" outside=\"0\" occluded=\"0\" xtl=\"{:.3}\" ytl=\"{:.3}\" xbr=\"{:.3}\" ybr=\"{:.3}\"><attribute name=\"id\">{}</attribute></box>\n",
                    c[0], c[1], c[2], c[3], t.track_id
                ));
            }
            xml.push_str("  </track>\n");
        }
        xml.push_str("</annotations>\n");
        std::fs::write(dir.join(format!("{video}.xml")), xml).unwrap();
    }
}

/// Synthetic turn tracks grouped several to a video, mimicking a benchmark
/// layout.
pub fn benchmark_like_tracks(videos: usize, per_video: usize, length: usize, seed: u64) -> Vec<Track> {
    let mut tracks = generate_synthetic(&SynthConfig {
        n_tracks: videos * per_video,
        length,
        motion: Motion::Turn,
        seed,
        ..Default::default()
    });
    for (i, t) in tracks.iter_mut().enumerate() {
        t.video_id = format!("video_{:04}", i / per_video + 1);
        t.track_id = format!("0_{}_{}", i / per_video + 1, i % per_video);
    }
    tracks
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
