//! Binary checkpoint: `MOEB`, u32 LE version, u64 LE header length, JSON
//! header, then every tensor as row-major f32 LE in manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{EncoderModel, ModelConfig, MoeLayerSpec};
use crate::moe::RoutingTable;
use crate::tensor::{HasParams, Tensor};

pub const MAGIC: &[u8; 4] = b"MOEB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRouting {
    pub routing: RoutingTable,
    pub provenance: Vec<Vec<usize>>,
}

/// A file the checkpoint depends on, identified by name and content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

/// Provenance stored next to the weights.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub vocab: Option<ArtifactRef>,
    pub importance_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    routing: Option<Vec<LayerRouting>>,
    #[serde(flatten)]
    meta: CheckpointMeta,
    payload_bytes: u64,
    payload_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn to_bytes(model: &EncoderModel, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(model.params().numel() * 4);
    let mut tensors = Vec::with_capacity(model.params().len());
    for (name, t) in model.params().iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        });
        for &v in t.data() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::Checkpoint(format!("{name} does not fit in 32-bit floats")));
            }
            payload.extend_from_slice(&f.to_le_bytes());
        }
    }
    let header = Header {
        config: model.config().clone(),
        tensors,
        routing: model.moe_specs().map(|specs| {
            specs
                .into_iter()
                .map(|s| LayerRouting {
                    routing: s.routing,
                    provenance: s.provenance,
                })
                .collect()
        }),
        meta: meta.clone(),
        payload_bytes: payload.len() as u64,
        payload_sha256: sha256_hex(&payload),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(EncoderModel, CheckpointMeta)> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = 16usize
        .checked_add(usize::try_from(header_len).map_err(|_| bad("header length overflows"))?)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let payload = &bytes[header_end..];
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 4).sum();
    if payload.len() != expected || header.payload_bytes != expected as u64 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, manifest needs {expected}",
            payload.len()
        )));
    }
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(bad("payload checksum mismatch"));
    }
    let mut tensors = BTreeMap::new();
    let mut offset = 0;
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let data = payload[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        offset += 4 * n;
        let t = Tensor::new(entry.shape.clone(), data).map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.name)))?;
        if tensors.insert(entry.name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {}", entry.name)));
        }
    }
    let specs: Option<Vec<MoeLayerSpec>> = header.routing.map(|layers| {
        layers
            .into_iter()
            .map(|l| MoeLayerSpec {
                routing: l.routing,
                provenance: l.provenance,
            })
            .collect()
    });
    let model = EncoderModel::from_tensors(&header.config, specs.as_deref(), tensors)?;
    let names: Vec<&str> = model.params().iter().map(|(n, _)| n).collect();
    if names.into_iter().ne(header.tensors.iter().map(|t| t.name.as_str())) {
        return Err(bad("tensor manifest is not in canonical order"));
    }
    Ok((model, header.meta))
}

pub fn save_checkpoint(model: &EncoderModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderModel, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    from_bytes(&bytes)
}
