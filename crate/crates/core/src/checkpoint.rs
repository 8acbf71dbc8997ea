//! Single-file checkpoints: named weight arrays in safetensors layout with the
//! run metadata stored as JSON in the header.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::decoder::CoordinateScales;
use crate::error::{Error, Result};
use crate::model::{Mgnet, ModelConfig};
use crate::training::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const META_KEY: &str = "mgnet";

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    /// Word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word position {}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    pub val_loss: Option<f64>,
    pub scales: CoordinateScales,
    pub init_seed: u64,
    pub dtype: String,
    pub rng: Option<RngState>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => (
            Dtype::F32,
            flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn tensor_from_view(name: &str, view: &TensorView<'_>) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return Err(Error::Checkpoint(format!("{name}: unsupported dtype {other:?}"))),
    };
    Ok(t)
}

impl Checkpoint {
    pub fn from_model(
        model: &Mgnet,
        epoch: usize,
        val_loss: Option<f64>,
        train: Option<TrainConfig>,
        rng: Option<RngState>,
    ) -> Result<Self> {
        Ok(Self {
            meta: CheckpointMeta {
                version: CHECKPOINT_VERSION,
                model: model.config().clone(),
                train,
                epoch,
                val_loss,
                scales: model.scales(),
                init_seed: model.init_seed(),
                dtype: dtype_name(model.dtype())?.to_string(),
                rng,
            },
            tensors: model.store().snapshot()?,
        })
    }

    /// Copies the stored weights and scales into an existing model.
    pub fn load_into(&self, model: &mut Mgnet) -> Result<()> {
        if model.config() != &self.meta.model {
            return Err(Error::Checkpoint("model configuration differs from the checkpoint".into()));
        }
        model.store().restore(&self.tensors)?;
        model.set_scales(self.meta.scales);
        Ok(())
    }

    pub fn build_model(&self) -> Result<Mgnet> {
        let mut m = Mgnet::new(
            self.meta.model.clone(),
            parse_dtype(&self.meta.dtype)?,
            self.meta.init_seed,
        )?;
        self.load_into(&mut m)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let bytes: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let (dt, b) = tensor_bytes(t)?;
                Ok((k.clone(), dt, t.dims().to_vec(), b))
            })
            .collect::<Result<_>>()?;
        let views = bytes
            .iter()
            .map(|(k, dt, shape, b)| {
                TensorView::new(*dt, shape.clone(), b)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut info = HashMap::new();
        info.insert(META_KEY.to_string(), serde_json::to_string(&self.meta)?);
        safetensors::serialize_to_file(views, Some(info), path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&buf).map_err(bad)?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing metadata", path.display())))?;
        let meta: CheckpointMeta = serde_json::from_str(meta_json)?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {} (expected {CHECKPOINT_VERSION})",
                path.display(),
                meta.version
            )));
        }
        let st = SafeTensors::deserialize(&buf).map_err(bad)?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let t = tensor_from_view(&name, &view)?;
            tensors.insert(name, t);
        }
        Ok(Self { meta, tensors })
    }
}
