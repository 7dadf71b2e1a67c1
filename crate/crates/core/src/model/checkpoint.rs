//! Checkpoint files: one JSON manifest line, a newline, then the raw
//! little-endian tensor payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xdomain_numerics::{ParamSet, Tensor};

use super::{parameter_layout, ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const FORMAT: &str = "xdomain-checkpoint/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageDtype {
    F64,
    F32,
}

impl StorageDtype {
    fn width(self) -> usize {
        match self {
            StorageDtype::F64 => 8,
            StorageDtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Byte length.
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config: ModelConfig,
    pub dtype: StorageDtype,
    pub tensors: Vec<TensorEntry>,
    /// Hex SHA-256 of the payload.
    pub sha256: String,
    #[serde(default)]
    pub extras: serde_json::Value,
}

/// Parameters plus free-form metadata stored alongside them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub extras: serde_json::Value,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode_checkpoint(ckpt: &Checkpoint, dtype: StorageDtype) -> Result<Vec<u8>> {
    ckpt.model.validate()?;
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in ckpt.model.params.iter() {
        if !t.is_finite() {
            return Err(bad(format!("parameter `{name}` holds non-finite values")));
        }
        let offset = payload.len();
        for &v in t.data() {
            match dtype {
                StorageDtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                StorageDtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            length: payload.len() - offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        config: ckpt.model.config.clone(),
        dtype,
        tensors,
        sha256: hex::encode(Sha256::digest(&payload)),
        extras: ckpt.extras.clone(),
    };
    let mut out = serde_json::to_vec(&manifest)?;
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses and fully validates checkpoint bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing manifest terminator"))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[..split]).map_err(|e| bad(format!("manifest: {e}")))?;
    let payload = &bytes[split + 1..];
    if manifest.format != FORMAT {
        return Err(bad(format!("unsupported format `{}`", manifest.format)));
    }
    manifest.config.validate()?;
    let digest = hex::encode(Sha256::digest(payload));
    if !digest.eq_ignore_ascii_case(&manifest.sha256) {
        return Err(bad("payload hash mismatch"));
    }

    let layout = parameter_layout(&manifest.config);
    if layout.len() != manifest.tensors.len() {
        return Err(bad(format!(
            "expected {} tensors, manifest lists {}",
            layout.len(),
            manifest.tensors.len()
        )));
    }
    let width = manifest.dtype.width();
    let mut params = ParamSet::new();
    for entry in &manifest.tensors {
        let expected = layout
            .iter()
            .find(|(n, _)| n == &entry.name)
            .ok_or_else(|| bad(format!("unexpected tensor `{}`", entry.name)))?;
        if expected.1 != entry.shape {
            return Err(bad(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                entry.name, entry.shape, expected.1
            )));
        }
        if params.get(&entry.name).is_some() {
            return Err(bad(format!("duplicate tensor `{}`", entry.name)));
        }
        let numel: usize = entry.shape.iter().product();
        if numel.checked_mul(width) != Some(entry.length) {
            return Err(bad(format!("tensor `{}` has byte length {}", entry.name, entry.length)));
        }
        let end = entry
            .offset
            .checked_add(entry.length)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| bad(format!("tensor `{}` runs past the payload", entry.name)))?;
        let raw = &payload[entry.offset..end];
        let data: Vec<f64> = match manifest.dtype {
            StorageDtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            StorageDtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("tensor `{}` holds non-finite values", entry.name)));
        }
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    let model = ModelParams {
        config: manifest.config,
        params,
    };
    model.validate()?;
    Ok(Checkpoint {
        model,
        extras: manifest.extras,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint, dtype: StorageDtype) -> Result<()> {
    let bytes = encode_checkpoint(ckpt, dtype)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; with `expected`, the stored config must match it.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = decode_checkpoint(&bytes)?;
    if let Some(cfg) = expected {
        ckpt.model.config.ensure_matches(cfg)?;
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            model_dim: 4,
            ff_dim: 6,
            max_positions: 10,
            vocab_size: 9,
            ..Default::default()
        };
        Checkpoint {
            model: ModelParams::init(&cfg, &mut rng::seeded(5)).unwrap(),
            extras: serde_json::json!({"readout": "verbalizer"}),
        }
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let c = sample();
        let bytes = encode_checkpoint(&c, StorageDtype::F64).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), c);
    }

    #[test]
    fn f32_round_trip_within_precision() {
        let c = sample();
        let bytes = encode_checkpoint(&c, StorageDtype::F32).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        for (name, t) in c.model.params.iter() {
            assert!(t.max_abs_diff(back.model.params.get(name).unwrap()) < 1e-7);
        }
    }

    #[test]
    fn corrupted_payload_rejected() {
        let mut bytes = encode_checkpoint(&sample(), StorageDtype::F64).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_rejected() {
        let bytes = encode_checkpoint(&sample(), StorageDtype::F64).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 8]).is_err());
        assert!(decode_checkpoint(b"{}").is_err());
    }

    #[test]
    fn config_mismatch_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample();
        save_checkpoint(&path, &c, StorageDtype::F64).unwrap();
        let other = ModelConfig {
            heads: 4,
            ..c.model.config.clone()
        };
        match load_checkpoint(&path, Some(&other)) {
            Err(Error::ConfigMismatch { field, .. }) => assert_eq!(field, "heads"),
            r => panic!("unexpected {r:?}"),
        }
        load_checkpoint(&path, Some(&c.model.config)).unwrap();
    }
}
