//! Model checkpoints in safetensors format with run metadata in the header.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TapModel};
use crate::schedule::ClassId;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub step_index: usize,
    pub classes_seen: Vec<ClassId>,
    pub config_hash: String,
    pub model_config: ModelConfig,
    pub num_classes_now: usize,
}

impl CheckpointMeta {
    fn to_map(&self) -> HashMap<String, String> {
        HashMap::from([
            ("step_index".into(), self.step_index.to_string()),
            (
                "classes_seen".into(),
                serde_json::to_string(&self.classes_seen).expect("serializes"),
            ),
            ("config_hash".into(), self.config_hash.clone()),
            (
                "model_config".into(),
                serde_json::to_string(&self.model_config).expect("serializes"),
            ),
            ("num_classes_now".into(), self.num_classes_now.to_string()),
        ])
    }

    fn from_map(map: &HashMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("metadata key `{k}` missing")))
        };
        let bad = |k: &str| Error::Checkpoint(format!("metadata key `{k}` malformed"));
        Ok(Self {
            step_index: get("step_index")?.parse().map_err(|_| bad("step_index"))?,
            classes_seen: serde_json::from_str(get("classes_seen")?)
                .map_err(|_| bad("classes_seen"))?,
            config_hash: get("config_hash")?.clone(),
            model_config: serde_json::from_str(get("model_config")?)
                .map_err(|_| bad("model_config"))?,
            num_classes_now: get("num_classes_now")?
                .parse()
                .map_err(|_| bad("num_classes_now"))?,
        })
    }
}

pub fn save_checkpoint(model: &TapModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let state = model.state_dict()?;
    let mut names: Vec<&String> = state.keys().collect();
    names.sort();
    let tensors: Vec<(&str, &Tensor)> = names.iter().map(|n| (n.as_str(), &state[*n])).collect();
    let views = tensors
        .iter()
        .map(|(n, t)| Ok((*n, TensorBytes::new(t)?)))
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, Some(meta.to_map()))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    // Write-then-rename so an interrupted save never leaves a truncated file.
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) =
        SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let map = header
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no metadata".into()))?;
    CheckpointMeta::from_map(map)
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<(TapModel, CheckpointMeta)> {
    let meta = read_checkpoint_meta(path)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let state = candle_core::safetensors::load_buffer(&bytes, device)?;
    let mut model = TapModel::new(&meta.model_config, meta.num_classes_now, 0, device)?;
    model.load_state_dict(&state)?;
    Ok((model, meta))
}

/// Raw little-endian view of a tensor for the safetensors writer.
struct TensorBytes {
    dtype: safetensors::Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl TensorBytes {
    fn new(t: &Tensor) -> Result<Self> {
        let flat = t.flatten_all()?;
        let (dtype, data) = match t.dtype() {
            candle_core::DType::F32 => (
                safetensors::Dtype::F32,
                flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            ),
            candle_core::DType::F64 => (
                safetensors::Dtype::F64,
                flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            ),
            other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
        };
        Ok(Self {
            dtype,
            shape: t.dims().to_vec(),
            data,
        })
    }
}

impl safetensors::View for TensorBytes {
    fn dtype(&self) -> safetensors::Dtype {
        self.dtype
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> std::borrow::Cow<'_, [u8]> {
        std::borrow::Cow::Borrowed(&self.data)
    }
    fn data_len(&self) -> usize {
        self.data.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_parameters_and_metadata() {
        let dev = Device::Cpu;
        let cfg = ModelConfig {
            stage_widths: vec![4, 6, 8, 8],
            tap_width: 5,
            embed_width: 6,
            ..ModelConfig::default()
        };
        let mut model = TapModel::new(&cfg, 2, 3, &dev).unwrap();
        model.extend_classifier(1, 9).unwrap();
        let meta = CheckpointMeta {
            step_index: 1,
            classes_seen: vec![1, 2, 3],
            config_hash: "abc".into(),
            model_config: cfg,
            num_classes_now: 3,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &meta, &path).unwrap();
        let (loaded, got) = load_checkpoint(&path, &dev).unwrap();
        assert_eq!(got, meta);
        let a = model.state_dict().unwrap();
        let b = loaded.state_dict().unwrap();
        for (k, t) in &a {
            let x = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let y = b[k].flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(x, y, "{k}");
        }
    }

    #[test]
    fn garbage_file_is_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert_eq!(
            read_checkpoint_meta(&path).unwrap_err().code(),
            "CHECKPOINT_ERROR"
        );
    }
}
