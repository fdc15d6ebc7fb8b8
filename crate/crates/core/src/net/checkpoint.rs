//! Single-file checkpoints: safetensors weights plus JSON metadata holding the
//! format version, the model config and optional trainer state.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;

use super::config::ModelConfig;
use super::model::ApexNet;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MODEL_PREFIX: &str = "model.";

#[derive(Debug)]
pub struct Checkpoint {
    pub model: ApexNet,
    pub train_state: Option<serde_json::Value>,
    /// Non-model tensors such as optimiser moments, keyed without prefix.
    pub extra: HashMap<String, Tensor>,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F64 => "f64",
        _ => "f32",
    }
}

pub fn save_checkpoint(
    model: &ApexNet,
    path: &Path,
    train_state: Option<&serde_json::Value>,
    extra: &[(String, Tensor)],
) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = model
        .named_vars()
        .into_iter()
        .map(|(k, v)| (format!("{MODEL_PREFIX}{k}"), v.as_tensor().clone()))
        .collect();
    for (k, t) in extra {
        if k.starts_with(MODEL_PREFIX) {
            return Err(Error::Checkpoint(format!("extra tensor {k} collides with model weights")));
        }
        tensors.push((k.clone(), t.clone()));
    }
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    let mut meta = HashMap::new();
    meta.insert("format_version".to_string(), CHECKPOINT_FORMAT_VERSION.to_string());
    meta.insert("dtype".to_string(), dtype_name(model.dtype()).to_string());
    meta.insert("model_config".to_string(), serde_json::to_string(&model.config)?);
    if let Some(s) = train_state {
        meta.insert("train_state".to_string(), serde_json::to_string(s)?);
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    safetensors::serialize_to_file(tensors.iter().map(|(k, t)| (k.as_str(), t)), Some(meta), &tmp)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let get = |k: &str| meta.get(k).ok_or_else(|| Error::Checkpoint(format!("missing metadata field {k}")));
    let version: u32 = get("format_version")?.parse().map_err(|_| Error::Checkpoint("unreadable format_version".into()))?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version} is not supported (expected {CHECKPOINT_FORMAT_VERSION})"
        )));
    }
    let dtype = if get("dtype")? == "f64" { DType::F64 } else { DType::F32 };
    let config: ModelConfig =
        serde_json::from_str(get("model_config")?).map_err(|e| Error::Checkpoint(format!("model_config: {e}")))?;
    let train_state = match meta.get("train_state") {
        Some(s) => Some(serde_json::from_str(s).map_err(|e| Error::Checkpoint(format!("train_state: {e}")))?),
        None => None,
    };
    let model = ApexNet::new(config, 0, dtype, device).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    for (name, _) in model.named_vars() {
        let t = tensors
            .remove(&format!("{MODEL_PREFIX}{name}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing weight {name}")))?;
        model.set_var(&name, &t)?;
    }
    if let Some(stray) = tensors.keys().find(|k| k.starts_with(MODEL_PREFIX)) {
        return Err(Error::Checkpoint(format!("unexpected weight {stray}")));
    }
    Ok(Checkpoint { model, train_state, extra: tensors })
}
