//! Binary checkpoint files.
//!
//! Layout: the 8-byte magic `DUDACKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then every
//! parameter tensor followed by every momentum tensor as little-endian `f64`
//! in header order.

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scenegen::write_atomic;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"DUDACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Counter-based RNG position: every random draw of step `t` derives from
/// `(seed, t)`, so these two numbers are the whole generator state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub rng: RngState,
    pub best_val_map: Option<f64>,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<Tensor>,
    pub velocity: Vec<Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let n: usize = self.params.iter().chain(&self.velocity).map(Tensor::len).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.params.iter().chain(&self.velocity) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
        let mut data = body[hlen..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if body.len() - hlen != 16 * expected {
            return Err(Error::Checkpoint(format!(
                "payload has {} bytes, header describes {}",
                body.len() - hlen,
                16 * expected
            )));
        }
        let mut read = || -> Vec<Tensor> {
            header
                .tensors
                .iter()
                .map(|t| {
                    let n = t.shape.iter().product();
                    Tensor::from_vec(&t.shape, data.by_ref().take(n).collect())
                })
                .collect()
        };
        let params = read();
        let velocity = read();
        Ok(Self {
            header,
            params,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuild the model and check that every tensor matches its architecture.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.header.model.clone(), 0)?;
        load_params(&mut model.store, &self.header.tensors, &self.params)?;
        Ok(model)
    }
}

pub fn describe(store: &ParamStore) -> Vec<TensorInfo> {
    store
        .ids()
        .map(|id| TensorInfo {
            name: store.name(id).to_string(),
            shape: store.get(id).shape().to_vec(),
        })
        .collect()
}

fn load_params(store: &mut ParamStore, infos: &[TensorInfo], values: &[Tensor]) -> Result<()> {
    if infos.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, architecture has {}",
            infos.len(),
            store.len()
        )));
    }
    for (id, (info, value)) in store
        .ids()
        .collect::<Vec<_>>()
        .into_iter()
        .zip(infos.iter().zip(values))
    {
        if store.name(id) != info.name || store.get(id).shape() != info.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match {} {:?}",
                info.name,
                info.shape,
                store.name(id),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = value.clone();
    }
    Ok(())
}

/// Lowercase hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}
