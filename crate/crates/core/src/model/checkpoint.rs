//! Checkpoint container: 8-byte magic, little-endian `u64` manifest length,
//! JSON manifest, then every tensor as contiguous little-endian `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::model::network::{Model, STATE_FORMAT};
use crate::model::spec::ModelSpec;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NCTTTCKP";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u64,
    /// Layout fingerprint, hex encoded.
    version: String,
    spec: ModelSpec,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let manifest = Manifest {
        format: STATE_FORMAT,
        version: format!("{:016x}", model.version()),
        spec: model.spec().clone(),
        tensors: model
            .params()
            .iter()
            .map(|(n, t)| Entry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
                dtype: "f8".into(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let numel: usize = model.params().iter().map(|(_, t)| t.numel()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * numel);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params().iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing checkpoint magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(format!("manifest length {len} exceeds file size {}", bytes.len())))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..end])?;
    if manifest.format != STATE_FORMAT {
        return Err(Error::VersionMismatch {
            expected: STATE_FORMAT,
            found: manifest.format,
        });
    }
    let mut params = ParamSet::new();
    let mut at = end;
    for e in &manifest.tensors {
        if e.dtype != "f8" {
            return Err(bad(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
        }
        let numel = e.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let stop = numel
            .and_then(|n| n.checked_mul(8))
            .and_then(|b| b.checked_add(at))
            .filter(|&s| s <= bytes.len())
            .ok_or_else(|| bad(format!("payload truncated in tensor `{}`", e.name)))?;
        let data = bytes[at..stop]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
        at = stop;
    }
    if at != bytes.len() {
        return Err(bad(format!("{} trailing bytes after payload", bytes.len() - at)));
    }
    let model = Model::from_params(manifest.spec, params)?;
    let found = u64::from_str_radix(&manifest.version, 16)
        .map_err(|_| bad(format!("malformed version tag `{}`", manifest.version)))?;
    if found != model.version() {
        return Err(Error::VersionMismatch {
            expected: model.version(),
            found,
        });
    }
    Ok(model)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode_checkpoint(&std::fs::read(path)?)
}
