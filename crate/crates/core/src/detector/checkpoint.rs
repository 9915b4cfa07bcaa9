//! Checkpoint files: a magic line, one line of JSON header, then every
//! parameter as little-endian f64 in `[w1, b1, .., w_head, b_head]` order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_detector, DetectorConfig, SpikingModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "QCPROBE-CHECKPOINT v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model_id: String,
    pub config: DetectorConfig,
    pub seed: u64,
    pub shapes: Vec<Vec<usize>>,
}

pub fn save_checkpoint(model: &SpikingModel, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        model_id: model.id.clone(),
        config: model.config().clone(),
        seed: model.config().seed,
        shapes: model.params().iter().map(|p| p.shape().to_vec()).collect(),
    };
    let mut bytes = format!("{MAGIC}\n{}\n", serde_json::to_string(&header)?).into_bytes();
    for p in model.params() {
        for v in p.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<SpikingModel> {
    let bad = |reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    if lines.next() != Some(MAGIC.as_bytes()) {
        return Err(bad("missing magic line"));
    }
    let header: CheckpointHeader = serde_json::from_slice(lines.next().ok_or_else(|| bad("missing header"))?)?;
    let body = lines.next().ok_or_else(|| bad("missing weights"))?;
    let mut model = build_detector(header.model_id.clone(), &header.config)?;
    let expected: usize = header.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if body.len() != expected * 8 {
        return Err(bad(&format!("expected {} weight bytes, found {}", expected * 8, body.len())));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let params = header
        .shapes
        .iter()
        .map(|shape| Tensor::from_vec(shape, values.by_ref().take(shape.iter().product()).collect()))
        .collect::<Result<Vec<_>>>()?;
    model.set_params(params)?;
    Ok(model)
}
