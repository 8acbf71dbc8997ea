//! Full network: encoders, latent model, goal module and decoder.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::cvae::{reparameterize, Cvae, LatentDistribution, LatentSample, LatentSource};
use crate::data::{check_stage_count, stage_goal_targets, TrajectoryWindow};
use crate::decoder::{CoordinateScales, Decoder};
use crate::encoder::{AttentionConfig, AttentionEncoder, EncodedFeatures, GruEncoder};
use crate::error::{Error, Result};
use crate::goals::{
    coarse_boundaries, EvaluatorConfig, GoalFeatureSet, GoalHead, GoalModule, GoalSet, LongTermGoal,
    StageGoalEvaluator,
};
use crate::nn::{tensor_from_f64, to_f64_vec, Ctx, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Observed steps, τ.
    pub obs_len: usize,
    /// Predicted steps, ρ.
    pub pred_len: usize,
    /// Stage goals, k. Ignored (treated as 1) when the evaluator is off.
    pub goals: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub box_embed_dim: usize,
    pub use_attention: bool,
    pub use_evaluator: bool,
    pub batch_norm: bool,
    pub attention: AttentionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            obs_len: 15,
            pred_len: 45,
            goals: 15,
            hidden_dim: 256,
            latent_dim: 32,
            box_embed_dim: 64,
            use_attention: true,
            use_evaluator: true,
            batch_norm: true,
            attention: AttentionConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Number of goal features the decoder receives.
    pub fn goal_count(&self) -> usize {
        if self.use_evaluator {
            self.goals
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_len == 0 || self.pred_len == 0 {
            return Err(Error::Config("observation and prediction lengths must be positive".into()));
        }
        if self.hidden_dim == 0 || self.latent_dim == 0 || self.box_embed_dim == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        check_stage_count(self.pred_len, self.goal_count())?;
        if self.use_attention {
            self.attention.validate()?;
        }
        Ok(())
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.use_attention = v.attention();
        self.use_evaluator = v.evaluator();
        self
    }
}

/// Component combinations compared in the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// CVAE encoding with a single long-term goal.
    Baseline,
    BaselineAttention,
    BaselineEvaluator,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::BaselineAttention,
        Variant::BaselineEvaluator,
        Variant::Full,
    ];

    pub fn attention(self) -> bool {
        matches!(self, Self::BaselineAttention | Self::Full)
    }

    pub fn evaluator(self) -> bool {
        matches!(self, Self::BaselineEvaluator | Self::Full)
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Baseline => "BL",
            Self::BaselineAttention => "BL+AT",
            Self::BaselineEvaluator => "BL+ES",
            Self::Full => "BL+AT+ES",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    /// `Z^q` from the recognition network; needs the future.
    Posterior,
    /// `z = μ^p`.
    PriorMean,
    /// `Z^p` drawn from the prior.
    PriorSample,
}

/// Model inputs for a set of windows: observed `(B, τ, 4)`, future
/// `(B, ρ, 4)`, stage-goal targets `(B, k, 4)`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub observed: Tensor,
    pub future: Tensor,
    pub goal_targets: Tensor,
    pub goal_times: Vec<usize>,
}

impl Batch {
    pub fn from_windows<'a>(
        windows: impl IntoIterator<Item = &'a TrajectoryWindow>,
        k: usize,
        dtype: DType,
    ) -> Result<Self> {
        let windows: Vec<&TrajectoryWindow> = windows.into_iter().collect();
        let first = windows
            .first()
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (tau, rho) = (first.obs_len(), first.pred_len());
        let mut obs = Vec::with_capacity(windows.len() * tau * 4);
        let mut fut = Vec::with_capacity(windows.len() * rho * 4);
        let mut goals = Vec::with_capacity(windows.len() * k * 4);
        let mut times = Vec::new();
        for w in &windows {
            if w.obs_len() != tau || w.pred_len() != rho {
                return Err(Error::Shape("windows in a batch must share (τ, ρ)".into()));
            }
            obs.extend(w.observed.iter().flatten());
            fut.extend(w.future.iter().flatten());
            let t = stage_goal_targets(&w.future, k)?;
            goals.extend(t.goals.iter().flatten());
            times = t.times;
        }
        let b = windows.len();
        Ok(Self {
            observed: tensor_from_f64(obs, &[b, tau, 4], dtype)?,
            future: tensor_from_f64(fut, &[b, rho, 4], dtype)?,
            goal_targets: tensor_from_f64(goals, &[b, k, 4], dtype)?,
            goal_times: times,
        })
    }

    pub fn len(&self) -> usize {
        self.observed.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Absolute normalized boxes `(B, ρ, 4)`.
    pub pred: Tensor,
    pub goals: GoalSet,
    pub goal_features: GoalFeatureSet,
    /// Coarse stage goals projected through the goal head, when the evaluator
    /// is active.
    pub coarse_goals: Option<GoalSet>,
    pub features: EncodedFeatures,
    pub h_g: Tensor,
    pub prior: LatentDistribution,
    pub posterior: Option<LatentDistribution>,
    pub latent: LatentSample,
}

pub struct Mgnet {
    config: ModelConfig,
    store: ParamStore,
    scales: CoordinateScales,
    init_seed: u64,
    pub past_encoder: GruEncoder,
    pub future_encoder: GruEncoder,
    pub attention: Option<AttentionEncoder>,
    pub cvae: Cvae,
    pub goal_module: GoalModule,
    pub goal_head: GoalHead,
    pub decoder: Decoder,
}

impl Mgnet {
    pub fn new(config: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let h = config.hidden_dim;
        let past_encoder = GruEncoder::new(&mut store, "past_encoder", 4, h)?;
        let future_encoder = GruEncoder::new(&mut store, "future_encoder", 4, h)?;
        let attention = if config.use_attention {
            Some(AttentionEncoder::new(&mut store, "attention", 4, &config.attention)?)
        } else {
            None
        };
        let a_dim = attention.as_ref().map_or(0, |a| a.config().output_dim);
        let cvae = Cvae::new(&mut store, h, config.latent_dim, a_dim, config.batch_norm)?;
        let k = config.goal_count();
        let goal_module = if k == 1 {
            GoalModule::LongTerm(LongTermGoal::new(&mut store, h, h, config.pred_len)?)
        } else {
            GoalModule::Staged(StageGoalEvaluator::new(
                &mut store,
                EvaluatorConfig::new(k, h, config.pred_len)?,
                h,
            )?)
        };
        let goal_head = GoalHead::new(&mut store, h)?;
        let decoder = Decoder::new(
            &mut store,
            h + a_dim + config.latent_dim,
            h,
            h,
            config.box_embed_dim,
            config.pred_len,
        )?;
        Ok(Self {
            config,
            store,
            scales: CoordinateScales::default(),
            init_seed: seed,
            past_encoder,
            future_encoder,
            attention,
            cvae,
            goal_module,
            goal_head,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn scales(&self) -> CoordinateScales {
        self.scales
    }

    pub fn set_scales(&mut self, scales: CoordinateScales) {
        self.scales = scales;
    }

    pub fn goal_count(&self) -> usize {
        self.config.goal_count()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.store.vars().keys().cloned().collect()
    }

    /// Runs the encoders; `future` is encoded only when given.
    pub fn encode(&self, observed: &Tensor, future: Option<&Tensor>, ctx: &mut Ctx) -> Result<EncodedFeatures> {
        let inv = 1.0 / self.scales.position;
        let obs = observed.affine(inv, 0.0)?;
        let h_x = self.past_encoder.encode(&obs)?;
        let h_y = future
            .map(|f| self.future_encoder.encode(&f.affine(inv, 0.0)?))
            .transpose()?;
        let h_a = match &self.attention {
            Some(a) => Some(a.encode(&obs, ctx)?),
            None => None,
        };
        Ok(EncodedFeatures { h_x, h_y, h_a })
    }

    pub fn forward(
        &self,
        observed: &Tensor,
        future: Option<&Tensor>,
        mode: LatentMode,
        ctx: &mut Ctx,
    ) -> Result<ForwardOutput> {
        let (_, tau, _) = observed.dims3()?;
        if tau != self.config.obs_len {
            return Err(Error::Shape(format!(
                "expected {} observed steps, got {tau}",
                self.config.obs_len
            )));
        }
        if mode == LatentMode::Posterior && future.is_none() {
            return Err(Error::Mode("posterior sampling needs the ground-truth future".into()));
        }
        let anchor = observed.narrow(1, tau - 1, 1)?.squeeze(1)?;
        let features = self.encode(observed, future, ctx)?;
        let prior = self.cvae.prior(&features.h_x, ctx)?;
        let posterior = match &features.h_y {
            Some(h_y) => Some(self.cvae.recognition(&features.h_x, Some(h_y), ctx)?),
            None => None,
        };
        let latent = match mode {
            LatentMode::Posterior => {
                let q = posterior.as_ref().expect("checked above");
                let eps = ctx.standard_normal(q.mu.dims(), q.mu.dtype())?;
                reparameterize(q, &eps, LatentSource::Recognition)?
            }
            LatentMode::PriorMean => LatentSample {
                z: prior.mu.clone(),
                source: LatentSource::PriorMean,
            },
            LatentMode::PriorSample => {
                let eps = ctx.standard_normal(prior.mu.dims(), prior.mu.dtype())?;
                reparameterize(&prior, &eps, LatentSource::Prior)?
            }
        };
        let h_g = self.cvae.generate(&features.h_x, &latent, features.h_a.as_ref(), ctx)?;
        let (goal_features, coarse_goals) = match &self.goal_module {
            GoalModule::Staged(e) => {
                let coarse = e.coarse_pass(&h_g)?;
                let fine = e.fine_pass(&h_g, &coarse, e.config().k)?;
                let coarse_set = GoalFeatureSet {
                    features: Tensor::stack(&coarse, 1)?,
                    times: coarse_boundaries(self.config.pred_len),
                };
                let coarse_goals = self.goal_head.project_goals(&coarse_set, self.scales.position)?;
                (fine, Some(coarse_goals))
            }
            GoalModule::LongTerm(l) => (l.forward(&h_g)?, None),
        };
        let goals = self.goal_head.project_goals(&goal_features, self.scales.position)?;
        let pred = self.decoder.decode_trajectory(
            &features.h_x,
            features.h_a.as_ref(),
            &latent.z,
            &anchor,
            &goal_features,
            &self.scales,
        )?;
        Ok(ForwardOutput {
            pred,
            goals,
            goal_features,
            coarse_goals,
            features,
            h_g,
            prior,
            posterior,
            latent,
        })
    }

    /// Eval-mode prediction for normalized windows, in batches; returns
    /// normalized future rows per window.
    pub fn predict_windows(
        &self,
        windows: &[TrajectoryWindow],
        batch_size: usize,
        mode: LatentMode,
        seed: u64,
    ) -> Result<Vec<Vec<[f64; 4]>>> {
        if mode == LatentMode::Posterior {
            return Err(Error::Mode("prediction cannot use the posterior".into()));
        }
        let mut ctx = Ctx::eval_seeded(seed);
        let rho = self.config.pred_len;
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(batch_size.max(1)) {
            let batch = Batch::from_windows(chunk, self.goal_count(), self.dtype())?;
            let pred = self.forward(&batch.observed, None, mode, &mut ctx)?.pred;
            let flat = to_f64_vec(&pred)?;
            for row in flat.chunks(rho * 4) {
                out.push(row.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect());
            }
        }
        Ok(out)
    }
}
