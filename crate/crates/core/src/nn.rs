//! Layers shared by every sub-network, built directly on candle tensors so
//! that initialization, dropout masks and batch statistics are driven by
//! seeded generators owned by the toolkit.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type Buffer = Arc<RwLock<Tensor>>;

/// Named learnable tensors and non-learnable buffers of one model.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    vars: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Buffer>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            vars: BTreeMap::new(),
            buffers: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert_var(&mut self, name: String, t: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        let t = tensor_from_f64(vals, shape, self.dtype)?;
        self.insert_var(name, t)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let t = tensor_from_f64(vec![value; n], shape, self.dtype)?;
        self.insert_var(name, t)
    }

    pub fn buffer(&mut self, name: String, shape: &[usize], value: f64) -> Result<Buffer> {
        let n: usize = shape.iter().product();
        let b = Arc::new(RwLock::new(tensor_from_f64(vec![value; n], shape, self.dtype)?));
        self.buffers.insert(name, b.clone());
        Ok(b)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn buffers(&self) -> &BTreeMap<String, Buffer> {
        &self.buffers
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Copies of every var and buffer value, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), v.as_tensor().copy()?);
        }
        for (k, b) in &self.buffers {
            out.insert(k.clone(), read_buffer(b).copy()?);
        }
        Ok(out)
    }

    pub fn restore(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, v) in &self.vars {
            let src = values
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {k}")))?;
            if src.dims() != v.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {k}: shape {:?} does not match {:?}",
                    src.dims(),
                    v.dims()
                )));
            }
            v.set(&src.to_dtype(self.dtype)?)?;
        }
        for (k, b) in &self.buffers {
            let src = values
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer {k}")))?;
            *b.write().expect("buffer lock") = src.to_dtype(self.dtype)?.copy()?;
        }
        Ok(())
    }
}

pub fn read_buffer(b: &Buffer) -> Tensor {
    b.read().expect("buffer lock").clone()
}

pub fn tensor_from_f64(vals: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(vals, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Flattens any tensor to host `f64` values.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Forward-pass context: train/eval switch plus the generator behind dropout
/// masks and latent noise.
pub struct Ctx {
    train: bool,
    dropout: f64,
    rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        Self::eval_seeded(0)
    }

    pub fn eval_seeded(seed: u64) -> Self {
        Self {
            train: false,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn train(seed: u64, dropout: f64) -> Self {
        Self::train_with(ChaCha8Rng::seed_from_u64(seed), dropout)
    }

    pub fn train_with(rng: ChaCha8Rng, dropout: f64) -> Self {
        Self {
            train: true,
            dropout,
            rng,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn dropout(&mut self, x: &Tensor) -> Result<Tensor> {
        if !self.train || self.dropout <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.dropout;
        let n = x.elem_count();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask = tensor_from_f64(mask, x.dims(), x.dtype())?;
        Ok(x.mul(&mask)?)
    }

    pub fn standard_normal(&mut self, shape: &[usize], dtype: DType) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        tensor_from_f64(vals, shape, dtype)
    }
}

/// Numerically stable logistic function, `(tanh(x / 2) + 1) / 2`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

/// Softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Affine layer `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// PyTorch-style uniform initialization with bound `1 / sqrt(in)`.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        Ok(Self {
            weight: store.uniform(format!("{name}.weight"), &[input, output], bound)?,
            bias: store.uniform(format!("{name}.bias"), &[output], bound)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let x2 = if dims.len() == 2 {
            x.contiguous()?
        } else {
            let lead: usize = dims[..dims.len() - 1].iter().product();
            x.contiguous()?.reshape((lead, self.in_dim()))?
        };
        let y = x2.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        if dims.len() == 2 {
            Ok(y)
        } else {
            let mut out = dims;
            *out.last_mut().unwrap() = self.out_dim();
            Ok(y.reshape(out)?)
        }
    }
}

/// Gated recurrent unit with the reset gate applied to the projected hidden
/// state:
///
/// ```text
/// r = σ(x W_ir + b_ir + h W_hr + b_hr)
/// z = σ(x W_iz + b_iz + h W_hz + b_hz)
/// n = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone)]
pub struct GruCell {
    pub input: Linear,
    pub recurrent: Linear,
    hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mk = |store: &mut ParamStore, part: &str, rows: usize| -> Result<Linear> {
            Ok(Linear {
                weight: store.uniform(format!("{name}.{part}.weight"), &[rows, 3 * hidden], bound)?,
                bias: store.uniform(format!("{name}.{part}.bias"), &[3 * hidden], bound)?,
            })
        };
        Ok(Self {
            input: mk(store, "input", input)?,
            recurrent: mk(store, "recurrent", hidden)?,
            hidden,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    /// Input contribution to the three gates, `x W_i + b_i`; accepts any
    /// leading shape.
    pub fn input_gates(&self, x: &Tensor) -> Result<Tensor> {
        self.input.forward(x)
    }

    /// One update given precomputed input gates `(B, 3H)`.
    pub fn step_gated(&self, gates_in: &Tensor, h: &Tensor) -> Result<Tensor> {
        let hd = self.hidden;
        let gh = self.recurrent.forward(h)?;
        let r = sigmoid(&(gates_in.narrow(D::Minus1, 0, hd)? + gh.narrow(D::Minus1, 0, hd)?)?)?;
        let z = sigmoid(&(gates_in.narrow(D::Minus1, hd, hd)? + gh.narrow(D::Minus1, hd, hd)?)?)?;
        let n = (gates_in.narrow(D::Minus1, 2 * hd, hd)? + r.mul(&gh.narrow(D::Minus1, 2 * hd, hd)?)?)?
            .tanh()?;
        // (1 - z) n + z h == n + z (h - n)
        Ok((&n + z.mul(&(h - &n)?)?)?)
    }

    pub fn step(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        self.step_gated(&self.input_gates(x)?, h)
    }
}

/// Batch normalization over the feature dimension of `(B, C)` inputs.
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    running_mean: Buffer,
    running_var: Buffer,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.constant(format!("{name}.beta"), &[dim], 0.0)?,
            running_mean: store.buffer(format!("{name}.running_mean"), &[dim], 0.0)?,
            running_var: store.buffer(format!("{name}.running_var"), &[dim], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let batch = x.dims()[0];
        let (mean, var) = if ctx.is_train() && batch > 1 {
            let mean = x.mean_keepdim(0)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(0)?;
            let m = self.momentum;
            let unbiased = var.affine(batch as f64 / (batch as f64 - 1.0), 0.0)?.detach();
            {
                let mut rm = self.running_mean.write().expect("buffer lock");
                *rm = ((&*rm * (1.0 - m))? + (mean.detach().squeeze(0)? * m)?)?;
                let mut rv = self.running_var.write().expect("buffer lock");
                *rv = ((&*rv * (1.0 - m))? + (unbiased.squeeze(0)? * m)?)?;
            }
            (mean, var)
        } else {
            (
                read_buffer(&self.running_mean).unsqueeze(0)?,
                read_buffer(&self.running_var).unsqueeze(0)?,
            )
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Layer normalization over the last dimension.
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.constant(format!("{name}.beta"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Three affine layers with batch normalization and rectifiers between them.
pub struct Mlp3 {
    layers: [Linear; 3],
    norms: Option<[BatchNorm; 2]>,
}

impl Mlp3 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        batch_norm: bool,
    ) -> Result<Self> {
        let layers = [
            Linear::new(store, &format!("{name}.fc1"), input, hidden)?,
            Linear::new(store, &format!("{name}.fc2"), hidden, hidden)?,
            Linear::new(store, &format!("{name}.fc3"), hidden, output)?,
        ];
        let norms = if batch_norm {
            Some([
                BatchNorm::new(store, &format!("{name}.bn1"), hidden)?,
                BatchNorm::new(store, &format!("{name}.bn2"), hidden)?,
            ])
        } else {
            None
        };
        Ok(Self { layers, norms })
    }

    pub fn affine_layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let mut h = x.clone();
        for i in 0..2 {
            h = self.layers[i].forward(&h)?;
            if let Some(norms) = &self.norms {
                h = norms[i].forward(&h, ctx)?;
            }
            h = h.relu()?;
        }
        self.layers[2].forward(&h)
    }
}
