//! On-disk model format: `model.json` (config and tensor table) next to
//! `model.bin` (little-endian f64, row-major, in manifest order).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slicer::RotationMode;
use crate::transformer::{Model, ModelConfig, ModelWeights};

pub const MANIFEST_FILE: &str = "model.json";
pub const WEIGHTS_FILE: &str = "model.bin";
pub const FORMAT_NAME: &str = "slicelab-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset into `model.bin`.
    pub offset: usize,
}

/// Where a sliced model came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceInfo {
    pub s: f64,
    pub d_original: usize,
    pub d_kept: usize,
    pub mode: RotationMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sliced: Option<SliceInfo>,
}

/// Serialize to manifest JSON and the weight blob.
pub fn encode_model(model: &Model, sliced: Option<SliceInfo>) -> Result<(String, Vec<u8>)> {
    let mut blob = Vec::with_capacity(model.weights.parameter_count() * 8);
    let mut tensors = Vec::new();
    for (name, view) in model.weights.named_tensors() {
        tensors.push(TensorRecord {
            name,
            rows: view.rows,
            cols: view.cols,
            offset: blob.len(),
        });
        for v in view.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        config: model.config.clone(),
        tensors,
        sliced,
    };
    Ok((serde_json::to_string_pretty(&manifest)? + "\n", blob))
}

pub fn decode_model(manifest_json: &str, blob: &[u8]) -> Result<(Model, Option<SliceInfo>)> {
    let manifest: Manifest = serde_json::from_str(manifest_json)?;
    if manifest.format != FORMAT_NAME || manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported model format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let mut table: HashMap<String, (usize, usize, Vec<f64>)> = HashMap::new();
    for t in &manifest.tensors {
        let len = t.rows * t.cols * 8;
        let bytes = t
            .offset
            .checked_add(len)
            .and_then(|end| blob.get(t.offset..end))
            .ok_or_else(|| Error::Format(format!("tensor {} runs past the end of {WEIGHTS_FILE}", t.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if table.insert(t.name.clone(), (t.rows, t.cols, data)).is_some() {
            return Err(Error::Format(format!("tensor {} listed twice", t.name)));
        }
    }
    let expected: usize = manifest.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if expected != blob.len() {
        return Err(Error::Format(format!(
            "{WEIGHTS_FILE} has {} bytes, manifest describes {expected}",
            blob.len()
        )));
    }
    let weights = ModelWeights::from_named(&manifest.config, |name| table.remove(name))?;
    if !table.is_empty() {
        let mut extra: Vec<_> = table.into_keys().collect();
        extra.sort();
        return Err(Error::Format(format!("unexpected tensors: {}", extra.join(", "))));
    }
    Ok((Model::new(manifest.config, weights)?, manifest.sliced))
}

/// Write `model.json` and `model.bin` into `dir`, creating it if needed.
pub fn save_model(dir: &Path, model: &Model, sliced: Option<SliceInfo>) -> Result<()> {
    let (json, blob) = encode_model(model, sliced)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    fs::write(dir.join(WEIGHTS_FILE), blob)?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<(Model, Option<SliceInfo>)> {
    let json = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let blob = fs::read(dir.join(WEIGHTS_FILE))?;
    decode_model(&json, &blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::new(8, 12, 2, 4, 1, 2, 5, 6).unwrap();
        let mut m = Model::init(cfg, 3);
        m.weights.blocks[1].residual_adapter = Some(DenseMatrix::identity(8).scale(-0.1));
        m.weights.embedding.set(0, 0, f64::MIN_POSITIVE / 3.0);
        let info = SliceInfo {
            s: 0.25,
            d_original: 8,
            d_kept: 6,
            mode: RotationMode::PerBlock,
        };
        let (json, blob) = encode_model(&m, Some(info)).unwrap();
        let (back, back_info) = decode_model(&json, &blob).unwrap();
        assert_eq!(back, m);
        assert_eq!(back_info, Some(info));
        assert_eq!(encode_model(&back, Some(info)).unwrap(), (json, blob));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = Model::init(ModelConfig::new(4, 4, 1, 4, 1, 1, 3, 4).unwrap(), 1);
        let (json, blob) = encode_model(&m, None).unwrap();
        assert!(decode_model(&json, &blob[..blob.len() - 8]).is_err());
        let mut longer = blob.clone();
        longer.extend_from_slice(&[0; 8]);
        assert!(decode_model(&json, &longer).is_err());
        assert!(decode_model(&json.replace(FORMAT_NAME, "other"), &blob).is_err());
    }
}
