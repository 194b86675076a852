//! Parameter container.
//!
//! Layout: the 8 magic bytes `SPSWCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the UTF-8 JSON header, then
//! every tensor's elements as little-endian `f64` in header order. The header
//! lists `{name, shape}` per tensor together with the model configuration and
//! free-form metadata.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SpairSwin};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SPSWCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    tool_version: String,
    model: ModelConfig,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            tool_version: crate::VERSION.to_string(),
            model: self.model.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(err("missing checkpoint magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(err(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(err("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| err(format!("bad header: {e}")))?;
        let mut payload = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if payload.len() < n * 8 {
                return Err(err(format!("truncated payload for `{}`", entry.name)));
            }
            let data = payload[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            payload = &payload[n * 8..];
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
        }
        if !payload.is_empty() {
            return Err(err(format!("{} trailing bytes after payload", payload.len())));
        }
        Ok(Checkpoint {
            model: header.model,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

impl SpairSwin {
    /// All parameters and buffers in store order.
    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            model: self.config.clone(),
            meta,
            tensors: self
                .store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.tensor.clone()))
                .collect(),
        }
    }

    /// Rebuilds the model from its configuration and overwrites every
    /// parameter with the stored value. Extra tensors (e.g. optimizer state)
    /// are ignored; missing parameters are an error.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = SpairSwin::new(ckpt.model.clone())?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.param(id).name.clone();
            let t = ckpt
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            model.store.set(id, t.clone())?;
        }
        Ok(model)
    }
}
