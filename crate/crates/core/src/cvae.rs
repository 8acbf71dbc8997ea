//! Conditional variational autoencoder: recognition network (training),
//! conditional prior network (inference) and generation network producing
//! `h_G`.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Mlp3, ParamStore};

/// Smallest standard deviation the latent heads may emit.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Batched diagonal Gaussian, `mu` and `sigma` of shape `(B, d_z)`.
#[derive(Debug, Clone)]
pub struct LatentDistribution {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl LatentDistribution {
    /// Builds a distribution from a `(B, 2 d_z)` head output laid out as
    /// `[mu, log sigma]`.
    pub fn from_head(out: &Tensor) -> Result<Self> {
        let d = out.dim(D::Minus1)? / 2;
        let mu = out.narrow(D::Minus1, 0, d)?;
        let sigma = out.narrow(D::Minus1, d, d)?.exp()?.maximum(SIGMA_FLOOR)?;
        Ok(Self { mu, sigma })
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.dims().last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentSource {
    Recognition,
    Prior,
    PriorMean,
}

#[derive(Debug, Clone)]
pub struct LatentSample {
    pub z: Tensor,
    pub source: LatentSource,
}

/// `z = mu + sigma ⊙ eps`, differentiable in both `mu` and `sigma`.
pub fn reparameterize(d: &LatentDistribution, eps: &Tensor, source: LatentSource) -> Result<LatentSample> {
    let sigma = d.sigma.maximum(SIGMA_FLOOR)?;
    Ok(LatentSample {
        z: (&d.mu + sigma.mul(eps)?)?,
        source,
    })
}

/// Closed-form `KL(q || p)` between diagonal Gaussians, summed over the latent
/// dimension: one value per batch row.
pub fn kl_divergence(q: &LatentDistribution, p: &LatentDistribution) -> Result<Tensor> {
    if q.mu.dims() != p.mu.dims() {
        return Err(Error::Shape(format!(
            "latent shapes differ: {:?} vs {:?}",
            q.mu.dims(),
            p.mu.dims()
        )));
    }
    let log_ratio = (p.sigma.log()? - q.sigma.log()?)?;
    let num = (q.sigma.sqr()? + (&q.mu - &p.mu)?.sqr()?)?;
    let quad = num.div(&p.sigma.sqr()?.affine(2.0, 0.0)?)?;
    let per_dim = ((log_ratio + quad)? - 0.5)?;
    Ok(per_dim.sum(D::Minus1)?)
}

pub struct Cvae {
    pub recognition: Mlp3,
    pub prior: Mlp3,
    pub generator: Mlp3,
    latent_dim: usize,
}

impl Cvae {
    /// `attention_dim` is the width of `h_A`, or 0 when attention is disabled.
    pub fn new(
        store: &mut ParamStore,
        hidden: usize,
        latent_dim: usize,
        attention_dim: usize,
        batch_norm: bool,
    ) -> Result<Self> {
        Ok(Self {
            recognition: Mlp3::new(store, "cvae.recognition", 2 * hidden, hidden, 2 * latent_dim, batch_norm)?,
            prior: Mlp3::new(store, "cvae.prior", hidden, hidden, 2 * latent_dim, batch_norm)?,
            generator: Mlp3::new(
                store,
                "cvae.generator",
                hidden + latent_dim + attention_dim,
                hidden,
                hidden,
                batch_norm,
            )?,
            latent_dim,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// `Q(Z | X, Y)`; needs the future encoding.
    pub fn recognition(&self, h_x: &Tensor, h_y: Option<&Tensor>, ctx: &Ctx) -> Result<LatentDistribution> {
        let h_y = h_y.ok_or_else(|| {
            Error::Mode("the recognition network needs the future encoding h_Y".into())
        })?;
        let x = Tensor::cat(&[h_x, h_y], D::Minus1)?;
        LatentDistribution::from_head(&self.recognition.forward(&x, ctx)?)
    }

    /// `P(Z | X)`
    pub fn prior(&self, h_x: &Tensor, ctx: &Ctx) -> Result<LatentDistribution> {
        LatentDistribution::from_head(&self.prior.forward(h_x, ctx)?)
    }

    /// `h_G` from `(h_X, z, h_A)`.
    pub fn generate(&self, h_x: &Tensor, z: &LatentSample, h_a: Option<&Tensor>, ctx: &Ctx) -> Result<Tensor> {
        let mut parts = vec![h_x.clone(), z.z.clone()];
        if let Some(a) = h_a {
            parts.push(a.clone());
        }
        let x = Tensor::cat(&parts, D::Minus1)?;
        if x.dim(D::Minus1)? != self.generator.input_dim() {
            return Err(Error::Shape(format!(
                "generation network expects {} input features, got {}",
                self.generator.input_dim(),
                x.dim(D::Minus1)?
            )));
        }
        self.generator.forward(&x, ctx)
    }
}
