//! Model checkpoints as one JSON document:
//!
//! ```json
//! {
//!   "format": "mvcnet-checkpoint",
//!   "version": 1,
//!   "config": { ...ModelConfig... },
//!   "tensors": { "backbone.conv_temporal.weight": { "shape": [8, 1, 1, 64], "data": [...] }, ... }
//! }
//! ```
//!
//! `tensors` holds every parameter and batch-norm running statistic under its
//! stable dotted name, values row-major.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{build_model, ModelBundle, ModelConfig, ModelError};

pub const CHECKPOINT_FORMAT: &str = "mvcnet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: BTreeMap<String, StoredTensor>,
}

fn err(path: &Path, reason: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<(), ModelError> {
    let mut tensors = BTreeMap::new();
    for (name, var) in bundle.store().all() {
        let t = var.as_tensor();
        tensors.insert(
            name.clone(),
            StoredTensor {
                shape: t.dims().to_vec(),
                data: t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?,
            },
        );
    }
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: bundle.config().clone(),
        tensors,
    };
    let text = serde_json::to_string(&ckpt).map_err(|e| err(path, e.to_string()))?;
    std::fs::write(path, text).map_err(|e| err(path, e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|e| err(path, e.to_string()))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| err(path, e.to_string()))?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(err(path, format!("unknown format {:?}", ckpt.format)));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(err(path, format!("unsupported version {}", ckpt.version)));
    }
    let bundle = build_model(&ckpt.config, 0)?;
    let dtype = bundle.dtype();
    let expected = bundle.store().all().count();
    if ckpt.tensors.len() != expected {
        return Err(err(
            path,
            format!(
                "{} tensors stored, model has {expected}",
                ckpt.tensors.len()
            ),
        ));
    }
    for (name, var) in bundle.store().all() {
        let stored = ckpt
            .tensors
            .get(name)
            .ok_or_else(|| err(path, format!("missing tensor {name}")))?;
        if stored.shape != var.dims() {
            return Err(err(
                path,
                format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    stored.shape,
                    var.dims()
                ),
            ));
        }
        let t = Tensor::from_vec(stored.data.clone(), stored.shape.as_slice(), &Device::Cpu)
            .map_err(|e| err(path, format!("tensor {name}: {e}")))?
            .to_dtype(dtype)?;
        var.set(&t)?;
    }
    Ok(bundle)
}
