//! Binary checkpoint: `u64` little-endian manifest length, a UTF-8 JSON
//! manifest, then every tensor as little-endian `f64` in manifest order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Provenance};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload section.
    pub offset: u64,
    /// Byte length.
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
}

impl Manifest {
    /// Structural checks that need no payload.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", self.format_version)));
        }
        let mut expected = 0u64;
        let mut seen = std::collections::HashSet::new();
        for t in &self.tensors {
            if !seen.insert(&t.name) {
                return Err(Error::Checkpoint(format!("duplicate tensor {}", t.name)));
            }
            if t.dtype != "f64" {
                return Err(Error::Checkpoint(format!("tensor {} has unsupported dtype {}", t.name, t.dtype)));
            }
            let numel: usize = t.shape.iter().product();
            if t.len != 8 * numel as u64 || t.offset != expected {
                return Err(Error::Checkpoint(format!(
                    "tensor {} payload span ({}, {}) does not match shape {:?}",
                    t.name, t.offset, t.len, t.shape
                )));
            }
            expected += t.len;
        }
        Ok(())
    }

    pub fn payload_len(&self) -> u64 {
        self.tensors.iter().map(|t| t.len).sum()
    }
}

/// Serializes `model` with optional scalar metrics.
pub fn to_bytes(model: &Model, metrics: &BTreeMap<String, f64>) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let tensors = model
        .store
        .iter()
        .map(|(_, name, t)| {
            let len = 8 * t.numel() as u64;
            let e = TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), dtype: "f64".into(), offset, len };
            offset += len;
            e
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        tensors,
        provenance: model.provenance.clone(),
        metrics: metrics.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in model.store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Reads and validates the manifest, returning it with the payload slice.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let head: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Checkpoint("file shorter than the manifest length prefix".into()))?;
    let mlen = u64::from_le_bytes(head) as usize;
    let json = bytes
        .get(8..8usize.saturating_add(mlen))
        .ok_or_else(|| Error::Checkpoint(format!("manifest of {mlen} bytes is truncated")))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
    manifest.validate()?;
    let payload = &bytes[8 + mlen..];
    if payload.len() as u64 != manifest.payload_len() {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, manifest expects {}",
            payload.len(),
            manifest.payload_len()
        )));
    }
    Ok((manifest, payload))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Manifest)> {
    let (manifest, payload) = read_manifest(bytes)?;
    let mut store = ParamStore::new();
    for t in &manifest.tensors {
        let raw = &payload[t.offset as usize..(t.offset + t.len) as usize];
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        store.insert(t.name.clone(), Tensor::new(t.shape.clone(), data)?)?;
    }
    let model = Model::from_store(manifest.config.clone(), store, manifest.provenance.clone())?;
    Ok((model, manifest))
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    save_checkpoint_with(model, &BTreeMap::new(), path)
}

pub fn save_checkpoint_with(model: &Model, metrics: &BTreeMap<String, f64>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = to_bytes(model, metrics)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    load_checkpoint_full(path).map(|(m, _)| m)
}

pub fn load_checkpoint_full(path: &Path) -> Result<(Model, Manifest)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Loads a checkpoint that must have exactly `config`.
pub fn load_checkpoint_as(path: &Path, config: &ModelConfig) -> Result<Model> {
    let model = load_checkpoint(path)?;
    if model.config.variant != config.variant {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds a {} model, expected {}",
            model.config.variant, config.variant
        )));
    }
    if model.config != *config {
        return Err(Error::Checkpoint("checkpoint config differs from the requested config".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::VariantKind;
    use crate::patch_embed::TokenSequence;

    fn tiny(variant: VariantKind) -> ModelConfig {
        ModelConfig { layers: 1, d: 8, d_ff: 16, n_heads: 2, vocab: 20, context: 32, variant, d1: 2, ..Default::default() }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = Model::new(tiny(VariantKind::Rep), 11).unwrap();
        let mut metrics = BTreeMap::new();
        metrics.insert("ppl".to_string(), 1.25);
        let bytes = to_bytes(&m, &metrics).unwrap();
        let (back, manifest) = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(manifest.metrics, metrics);
        let seq = TokenSequence::text(&[1, 5, 7]);
        assert_eq!(back.forward(&seq).unwrap(), m.forward(&seq).unwrap());
    }

    #[test]
    fn truncation_and_corruption_are_rejected() {
        let m = Model::new(tiny(VariantKind::Dense), 1).unwrap();
        let bytes = to_bytes(&m, &BTreeMap::new()).unwrap();
        let err = from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
        assert!(from_bytes(&bytes[..4]).is_err());
        let mut bad = bytes.clone();
        bad[9] = b'#';
        assert!(from_bytes(&bad).unwrap_err().to_string().contains("corrupt manifest"));
    }

    #[test]
    fn unknown_names_and_kind_mismatch_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::new(tiny(VariantKind::Dense), 1).unwrap();
        save_checkpoint(&m, &path).unwrap();
        assert!(load_checkpoint_as(&path, &tiny(VariantKind::Dense)).is_ok());
        let err = load_checkpoint_as(&path, &tiny(VariantKind::Dac)).unwrap_err();
        assert!(err.to_string().contains("dense"), "{err}");

        let mut store = m.store.clone();
        store.insert("layers.0.extra", Tensor::zeros(&[2])).unwrap();
        let err = Model::from_store(m.config.clone(), store, Provenance::default()).unwrap_err();
        assert!(err.to_string().contains("unknown tensor"), "{err}");
    }
}
