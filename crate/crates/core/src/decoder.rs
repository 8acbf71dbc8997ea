//! Forward recursive decoding guided by stage-goal features.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::goals::{covering_index, GoalFeatureSet};
use crate::nn::{GruCell, Linear, ParamStore};

/// Fixed (non-learned) rescaling between normalized coordinates and the
/// unit-scale values the networks see. Estimated from the training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordinateScales {
    /// Typical magnitude of a normalized future position.
    pub position: f64,
    /// Typical magnitude of a normalized per-step displacement.
    pub delta: f64,
}

impl Default for CoordinateScales {
    fn default() -> Self {
        Self {
            position: 1.0,
            delta: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderState {
    pub hidden: Tensor,
    /// Next future step to emit, 1-based.
    pub step: usize,
    /// Absolute normalized box of the previous step `(B, 4)`.
    pub position: Tensor,
}

pub struct Decoder {
    pub init: Linear,
    pub box_embed: Linear,
    pub cell: GruCell,
    pub output: Linear,
    rho: usize,
}

impl Decoder {
    /// `context_dim` is the width of `[h_X, h_A, z]`.
    pub fn new(
        store: &mut ParamStore,
        context_dim: usize,
        hidden: usize,
        goal_dim: usize,
        box_embed_dim: usize,
        rho: usize,
    ) -> Result<Self> {
        Ok(Self {
            init: Linear::new(store, "decoder.init", context_dim, hidden)?,
            box_embed: Linear::new(store, "decoder.box_embed", 4, box_embed_dim)?,
            cell: GruCell::new(store, "decoder.cell", box_embed_dim + goal_dim, hidden)?,
            output: Linear::new(store, "decoder.output", hidden, 4)?,
            rho,
        })
    }

    pub fn pred_len(&self) -> usize {
        self.rho
    }

    /// Hidden state from the affine projection of `[h_X, h_A, z]`.
    pub fn init_decoder(
        &self,
        h_x: &Tensor,
        h_a: Option<&Tensor>,
        z: &Tensor,
        anchor: &Tensor,
    ) -> Result<DecoderState> {
        let mut parts = vec![h_x.clone()];
        if let Some(a) = h_a {
            parts.push(a.clone());
        }
        parts.push(z.clone());
        let ctx = Tensor::cat(&parts, D::Minus1)?;
        if ctx.dim(D::Minus1)? != self.init.in_dim() {
            return Err(Error::Shape(format!(
                "decoder init expects {} features, got {}",
                self.init.in_dim(),
                ctx.dim(D::Minus1)?
            )));
        }
        Ok(DecoderState {
            hidden: self.init.forward(&ctx)?,
            step: 1,
            position: anchor.clone(),
        })
    }

    /// Consumes the previous box and the covering goal feature; returns the
    /// next state and the emitted displacement.
    pub fn decode_step(
        &self,
        state: &DecoderState,
        goal_feature: &Tensor,
        scales: &CoordinateScales,
    ) -> Result<(DecoderState, Tensor)> {
        if state.step > self.rho {
            return Err(Error::Shape(format!(
                "decode step {} exceeds the prediction length {}",
                state.step, self.rho
            )));
        }
        let emb = self
            .box_embed
            .forward(&state.position.affine(1.0 / scales.position, 0.0)?)?
            .relu()?;
        let input = Tensor::cat(&[&emb, goal_feature], D::Minus1)?;
        let hidden = self.cell.step(&input, &state.hidden)?;
        let delta = self.output.forward(&hidden)?.affine(scales.delta, 0.0)?;
        let position = (&state.position + &delta)?;
        Ok((
            DecoderState {
                hidden,
                step: state.step + 1,
                position,
            },
            delta,
        ))
    }

    /// Rolls out all `rho` steps; step `s` is guided by the goal feature
    /// whose stage covers `s`. Returns absolute normalized boxes `(B, rho, 4)`.
    pub fn decode_trajectory(
        &self,
        h_x: &Tensor,
        h_a: Option<&Tensor>,
        z: &Tensor,
        anchor: &Tensor,
        goals: &GoalFeatureSet,
        scales: &CoordinateScales,
    ) -> Result<Tensor> {
        let mut state = self.init_decoder(h_x, h_a, z, anchor)?;
        let features = (0..goals.len())
            .map(|j| goals.feature(j))
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::with_capacity(self.rho);
        for s in 1..=self.rho {
            let j = covering_index(s, &goals.times);
            let (next, _) = self.decode_step(&state, &features[j], scales)?;
            rows.push(next.position.clone());
            state = next;
        }
        Ok(Tensor::stack(&rows, 1)?)
    }
}
