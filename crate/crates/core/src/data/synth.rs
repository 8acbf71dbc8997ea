//! Synthetic pedestrian tracks used as a verification corpus.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BoundingBox, Track};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    ConstantVelocity,
    /// Heading rotates by `turn_angle_deg` around the middle of the track.
    Turn,
    /// Moving, standing still through the middle third, then moving again.
    StopGo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_tracks: usize,
    pub length: usize,
    pub motion: Motion,
    /// Std-dev of the i.i.d. Gaussian noise on each coordinate, pixels.
    pub noise_sigma: f64,
    pub seed: u64,
    pub image_w: f64,
    pub image_h: f64,
    /// Signed heading change of `Turn` tracks, degrees.
    pub turn_angle_deg: f64,
    /// Frames over which the turn is spread.
    pub turn_frames: usize,
    /// Speed range, pixels per frame.
    pub min_speed: f64,
    pub max_speed: f64,
    pub fps: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_tracks: 100,
            length: 80,
            motion: Motion::Turn,
            noise_sigma: 1.0,
            seed: 0,
            image_w: 1920.0,
            image_h: 1080.0,
            turn_angle_deg: 90.0,
            turn_frames: 10,
            min_speed: 2.0,
            max_speed: 6.0,
            fps: 30.0,
        }
    }
}

/// Heading offset (radians) applied at frame `t` of a turn track.
fn turn_progress(t: usize, length: usize, turn_frames: usize, angle: f64) -> f64 {
    let mid = length as f64 / 2.0;
    let half = turn_frames as f64 / 2.0;
    let start = mid - half;
    if turn_frames == 0 {
        return if (t as f64) >= mid { angle } else { 0.0 };
    }
    let frac = ((t as f64 - start) / turn_frames as f64).clamp(0.0, 1.0);
    angle * frac
}

/// Each track is its own video so video-level splits stay fine-grained.
pub fn generate_synthetic(cfg: &SynthConfig) -> Vec<Track> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("finite sigma");
    let angle = cfg.turn_angle_deg.to_radians();
    (0..cfg.n_tracks)
        .map(|i| {
            let x0 = rng.random_range(0.3..0.7) * cfg.image_w;
            let y0 = rng.random_range(0.4..0.7) * cfg.image_h;
            let heading = rng.random_range(0.0..2.0 * PI);
            let speed = if cfg.max_speed > cfg.min_speed {
                rng.random_range(cfg.min_speed..cfg.max_speed)
            } else {
                cfg.min_speed
            };
            let w = rng.random_range(30.0..70.0);
            let h = 2.2 * w;
            let centers: Vec<(f64, f64)> = match cfg.motion {
                Motion::ConstantVelocity => (0..cfg.length)
                    .map(|t| {
                        let d = speed * t as f64;
                        (x0 + d * heading.cos(), y0 + d * heading.sin())
                    })
                    .collect(),
                Motion::Turn | Motion::StopGo => {
                    let third = cfg.length / 3;
                    let mut pos = (x0, y0);
                    let mut out = Vec::with_capacity(cfg.length);
                    for t in 0..cfg.length {
                        out.push(pos);
                        let (theta, v) = match cfg.motion {
                            Motion::Turn => (
                                heading + turn_progress(t, cfg.length, cfg.turn_frames, angle),
                                speed,
                            ),
                            _ => {
                                let moving = t < third || t >= 2 * third;
                                (heading, if moving { speed } else { 0.0 })
                            }
                        };
                        pos = (pos.0 + v * theta.cos(), pos.1 + v * theta.sin());
                    }
                    out
                }
            };
            let mut jitter = || {
                if cfg.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                }
            };
            let boxes = centers
                .into_iter()
                .map(|(cx, cy)| BoundingBox {
                    cx: cx + jitter(),
                    cy: cy + jitter(),
                    w: (w + jitter()).max(1.0),
                    h: (h + jitter()).max(1.0),
                })
                .collect();
            Track {
                track_id: "0".into(),
                video_id: format!("synth_{i:05}"),
                frames: (0..cfg.length as u64).collect(),
                boxes,
                fps: cfg.fps,
            }
        })
        .collect()
}
