//! Flat named-tensor checkpoints with the detector config stored alongside.

use std::collections::HashMap;
use std::path::Path;

use safetensors::SafeTensors;

use crate::assembly::{Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::nn::sorted_vars;

/// Value of the `format` metadata key.
pub const CHECKPOINT_FORMAT: &str = "xraydet-checkpoint-1";

pub fn save_checkpoint(path: &Path, detector: &Detector) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let vars = sorted_vars(detector.varmap());
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    meta.insert("config".to_string(), serde_json::to_string(detector.config())?);
    let tensors: Vec<(String, candle_core::Tensor)> =
        vars.into_iter().map(|(k, v)| (k, v.as_tensor().clone())).collect();
    safetensors::serialize_to_file(tensors, Some(meta), path)?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn config_from_bytes(buf: &[u8]) -> Result<DetectorConfig> {
    let (_, meta) = SafeTensors::read_metadata(buf)?;
    let meta = meta
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::CheckpointMismatch("checkpoint carries no metadata".into()))?;
    match meta.get("format") {
        Some(f) if f == CHECKPOINT_FORMAT => {}
        other => {
            return Err(Error::CheckpointMismatch(format!(
                "unknown checkpoint format {other:?}"
            )))
        }
    }
    let config = meta
        .get("config")
        .ok_or_else(|| Error::CheckpointMismatch("checkpoint has no detector config".into()))?;
    Ok(serde_json::from_str(config)?)
}

/// The detector config a checkpoint was written from.
pub fn read_checkpoint_config(path: &Path) -> Result<DetectorConfig> {
    config_from_bytes(&read_bytes(path)?)
}

/// Copy a checkpoint's weights into `detector`.
///
/// The stored config must describe the same architecture, and the tensor
/// names and shapes must match exactly.
pub fn load_checkpoint(path: &Path, detector: &Detector) -> Result<()> {
    let buf = read_bytes(path)?;
    let stored = config_from_bytes(&buf)?;
    let current = detector.config();
    if stored.head != current.head || stored.backbone.kind != current.backbone.kind {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint holds {} but the model is {}",
            stored.name(),
            current.name()
        )));
    }
    let tensors = candle_core::safetensors::load_buffer(&buf, detector.device())?;
    let vars = sorted_vars(detector.varmap());
    if let Some(extra) = tensors.keys().find(|k| !vars.iter().any(|(n, _)| n == *k)) {
        return Err(Error::CheckpointMismatch(format!("unexpected tensor {extra}")));
    }
    for (name, var) in &vars {
        let t = tensors
            .get(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {name}")))?;
        if t.dims() != var.dims() {
            return Err(Error::CheckpointMismatch(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(())
}
