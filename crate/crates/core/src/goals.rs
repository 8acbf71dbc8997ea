//! Multi-stage goal evaluator.
//!
//! Two reverse recurrences run from the last future step back to the first,
//! both started from `h_G`. The upper (coarse) layer is read out at three
//! stage boundaries. The lower (fine) layer is read out at the `k` stage-goal
//! times; each readout is concatenated with the coarse feature whose stage
//! covers that time and fused into one goal feature. A linear head maps goal
//! features to normalized boxes for supervision.
//!
//! With `k == 1` the evaluator is bypassed and a single long-term goal feature
//! is produced from `h_G` directly.

use candle_core::{Tensor, D};

use crate::data::check_stage_count;
use crate::error::{Error, Result};
use crate::nn::{GruCell, Linear, ParamStore};

pub const COARSE_STAGES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvaluatorConfig {
    pub k: usize,
    pub coarse_stages: usize,
    pub hidden_dim: usize,
    pub rho: usize,
}

impl EvaluatorConfig {
    pub fn new(k: usize, hidden_dim: usize, rho: usize) -> Result<Self> {
        check_stage_count(rho, k)?;
        Ok(Self {
            k,
            coarse_stages: COARSE_STAGES,
            hidden_dim,
            rho,
        })
    }

    pub fn bypassed(&self) -> bool {
        self.k == 1
    }
}

/// Coarse stage boundaries: multiples of `ceil(rho / 3)`, the last clamped to `rho`.
pub fn coarse_boundaries(rho: usize) -> Vec<usize> {
    let spacing = rho.div_ceil(COARSE_STAGES).max(1);
    (1..=COARSE_STAGES).map(|c| (c * spacing).min(rho)).collect()
}

/// Fine stage-goal times `(j + 1) * rho / k`.
pub fn fine_boundaries(rho: usize, k: usize) -> Vec<usize> {
    (1..=k).map(|j| j * rho / k).collect()
}

/// Index of the first stage whose boundary is at or after `time`: the stage
/// whose interval contains it.
pub fn covering_index(time: usize, boundaries: &[usize]) -> usize {
    boundaries
        .iter()
        .position(|&b| b >= time)
        .unwrap_or(boundaries.len() - 1)
}

/// Per-goal features `(B, k, F)` with their 1-based future step times.
#[derive(Debug, Clone)]
pub struct GoalFeatureSet {
    pub features: Tensor,
    pub times: Vec<usize>,
}

impl GoalFeatureSet {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Feature `(B, F)` of goal `j`.
    pub fn feature(&self, j: usize) -> Result<Tensor> {
        Ok(self.features.narrow(1, j, 1)?.squeeze(1)?)
    }
}

/// Normalized stage-goal boxes `(B, k, 4)`.
#[derive(Debug, Clone)]
pub struct GoalSet {
    pub goals: Tensor,
    pub times: Vec<usize>,
}

pub struct StageGoalEvaluator {
    pub coarse_input: Linear,
    pub coarse: GruCell,
    pub fine_input: Linear,
    pub fine: GruCell,
    pub fusion: Linear,
    config: EvaluatorConfig,
}

impl StageGoalEvaluator {
    pub fn new(store: &mut ParamStore, config: EvaluatorConfig, feature_dim: usize) -> Result<Self> {
        if config.bypassed() {
            return Err(Error::Config(
                "k = 1 bypasses the stage evaluator; use the long-term goal head".into(),
            ));
        }
        let h = config.hidden_dim;
        Ok(Self {
            coarse_input: Linear::new(store, "evaluator.coarse_input", h, h)?,
            coarse: GruCell::new(store, "evaluator.coarse", h, h)?,
            fine_input: Linear::new(store, "evaluator.fine_input", h, h)?,
            fine: GruCell::new(store, "evaluator.fine", h, h)?,
            fusion: Linear::new(store, "evaluator.fusion", 2 * h, feature_dim)?,
            config,
        })
    }

    pub fn config(&self) -> &EvaluatorConfig {
        &self.config
    }

    /// Runs `cell` from step `rho` down to step 1, starting from `h_G` and
    /// fed a projection of `h_G` at every step; returns the hidden states at
    /// `readouts` (ascending) and optionally records the visit order.
    fn reverse_pass(
        &self,
        input: &Linear,
        cell: &GruCell,
        h_g: &Tensor,
        readouts: &[usize],
        mut trace: Option<&mut Vec<usize>>,
    ) -> Result<Vec<Tensor>> {
        let gates = cell.input_gates(&input.forward(h_g)?.relu()?)?;
        let mut h = h_g.clone();
        let mut out: Vec<Option<Tensor>> = vec![None; readouts.len()];
        for step in (1..=self.config.rho).rev() {
            h = cell.step_gated(&gates, &h)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(step);
            }
            for (i, &b) in readouts.iter().enumerate() {
                if b == step {
                    out[i] = Some(h.clone());
                }
            }
        }
        Ok(out.into_iter().map(|t| t.expect("every readout lies in 1..=rho")).collect())
    }

    /// The three coarse stage features, in ascending time order.
    pub fn coarse_pass(&self, h_g: &Tensor) -> Result<Vec<Tensor>> {
        self.coarse_pass_traced(h_g, None)
    }

    pub fn coarse_pass_traced(&self, h_g: &Tensor, trace: Option<&mut Vec<usize>>) -> Result<Vec<Tensor>> {
        let bounds = coarse_boundaries(self.config.rho);
        self.reverse_pass(&self.coarse_input, &self.coarse, h_g, &bounds, trace)
    }

    /// Fine goal features guided by the covering coarse features.
    pub fn fine_pass(&self, h_g: &Tensor, coarse: &[Tensor], k: usize) -> Result<GoalFeatureSet> {
        self.fine_pass_traced(h_g, coarse, k, None)
    }

    pub fn fine_pass_traced(
        &self,
        h_g: &Tensor,
        coarse: &[Tensor],
        k: usize,
        trace: Option<&mut Vec<usize>>,
    ) -> Result<GoalFeatureSet> {
        if k == 1 {
            return Err(Error::Config(
                "k = 1 bypasses the stage evaluator; use the long-term goal head".into(),
            ));
        }
        check_stage_count(self.config.rho, k)?;
        if coarse.len() != self.config.coarse_stages {
            return Err(Error::Shape(format!(
                "expected {} coarse features, got {}",
                self.config.coarse_stages,
                coarse.len()
            )));
        }
        let times = fine_boundaries(self.config.rho, k);
        let coarse_times = coarse_boundaries(self.config.rho);
        let hidden = self.reverse_pass(&self.fine_input, &self.fine, h_g, &times, trace)?;
        let features = hidden
            .iter()
            .zip(&times)
            .map(|(h, &t)| {
                let guide = &coarse[covering_index(t, &coarse_times)];
                Ok(self.fusion.forward(&Tensor::cat(&[h, guide], D::Minus1)?)?.relu()?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GoalFeatureSet {
            features: Tensor::stack(&features, 1)?,
            times,
        })
    }

    pub fn forward(&self, h_g: &Tensor) -> Result<GoalFeatureSet> {
        let coarse = self.coarse_pass(h_g)?;
        self.fine_pass(h_g, &coarse, self.config.k)
    }
}

/// Single long-term goal feature at time `rho`, used when `k == 1`.
pub struct LongTermGoal {
    pub head: Linear,
    rho: usize,
}

impl LongTermGoal {
    pub fn new(store: &mut ParamStore, hidden: usize, feature_dim: usize, rho: usize) -> Result<Self> {
        Ok(Self {
            head: Linear::new(store, "long_term_goal", hidden, feature_dim)?,
            rho,
        })
    }

    pub fn forward(&self, h_g: &Tensor) -> Result<GoalFeatureSet> {
        Ok(GoalFeatureSet {
            features: self.head.forward(h_g)?.relu()?.unsqueeze(1)?,
            times: vec![self.rho],
        })
    }
}

pub enum GoalModule {
    Staged(StageGoalEvaluator),
    LongTerm(LongTermGoal),
}

impl GoalModule {
    pub fn forward(&self, h_g: &Tensor) -> Result<GoalFeatureSet> {
        match self {
            Self::Staged(e) => e.forward(h_g),
            Self::LongTerm(l) => l.forward(h_g),
        }
    }

    pub fn evaluator(&self) -> Option<&StageGoalEvaluator> {
        match self {
            Self::Staged(e) => Some(e),
            Self::LongTerm(_) => None,
        }
    }
}

/// Affine map from goal features to normalized stage-goal boxes.
pub struct GoalHead {
    pub projection: Linear,
}

impl GoalHead {
    pub fn new(store: &mut ParamStore, feature_dim: usize) -> Result<Self> {
        Ok(Self {
            projection: Linear::new(store, "goal_head", feature_dim, 4)?,
        })
    }

    /// `scale` maps the network's unit-scale output back to normalized
    /// coordinates.
    pub fn project_goals(&self, features: &GoalFeatureSet, scale: f64) -> Result<GoalSet> {
        let goals = self.projection.forward(&features.features)?.affine(scale, 0.0)?;
        Ok(GoalSet {
            goals,
            times: features.times.clone(),
        })
    }
}
