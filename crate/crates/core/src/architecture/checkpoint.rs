//! Self-describing checkpoint container.
//!
//! Layout: a magic line, a line with the header length in bytes, the JSON
//! header (config, metadata, tensor manifest), then the little-endian f32
//! payload. Manifest offsets count bytes from the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

use super::config::ModelConfig;
use super::model::Spikformer;

const MAGIC: &str = "SPIKEKIT-CHECKPOINT 1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: Value,
    meta: Value,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Value,
    pub meta: Value,
    pub tensors: Vec<(String, DenseTensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let manifest = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += 4 * t.numel();
                e
            })
            .collect();
        let header = Header { config: self.config.clone(), meta: self.meta.clone(), tensors: manifest };
        let json = serde_json::to_string(&header).expect("header serializes");
        let mut out = format!("{MAGIC}\n{}\n{json}", json.len()).into_bytes();
        out.reserve(offset);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Load(m.to_string());
        let line_end = |from: usize| bytes[from..].iter().position(|&b| b == b'\n').map(|p| from + p);
        let l1 = line_end(0).ok_or_else(|| err("missing magic line"))?;
        if &bytes[..l1] != MAGIC.as_bytes() {
            return Err(err("not a spikekit checkpoint"));
        }
        let l2 = line_end(l1 + 1).ok_or_else(|| err("missing header length"))?;
        let len: usize = std::str::from_utf8(&bytes[l1 + 1..l2])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("bad header length"))?;
        let start = l2 + 1;
        let payload = start.checked_add(len).filter(|&p| p <= bytes.len()).ok_or_else(|| err("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[start..payload]).map_err(|e| Error::Load(format!("header: {e}")))?;
        let data = &bytes[payload..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset + 4 * n;
            if end > data.len() {
                return Err(Error::Load(format!("tensor {} runs past the payload", e.name)));
            }
            let vals = data[e.offset..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((e.name, DenseTensor::new(e.shape, vals)?));
        }
        Ok(Self { config: header.config, meta: header.meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Load(format!("model config: {e}")))
    }

    pub fn get(&self, name: &str) -> Option<&DenseTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn is_encoder_tensor(name: &str) -> bool {
    name.starts_with("stem.") || name.starts_with("rpe.") || name.starts_with("blocks.")
}

impl Spikformer {
    /// Every parameter and buffer, with `meta` stored alongside.
    pub fn to_checkpoint(&self, meta: Value) -> Checkpoint {
        Checkpoint {
            config: serde_json::to_value(self.cfg()).expect("config serializes"),
            meta,
            tensors: self.store.entries().map(|(_, e)| (e.name.clone(), e.value.clone())).collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: Value) -> Result<()> {
        self.to_checkpoint(meta).save(path)
    }

    /// Rebuilds the model described by the checkpoint and loads every tensor.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ckpt.model_config()?;
        let mut model = Spikformer::new(cfg, 0)?;
        let names: Vec<String> = model.store.entries().map(|(_, e)| e.name.clone()).collect();
        if names.len() != ckpt.tensors.len() {
            return Err(Error::Load(format!("checkpoint has {} tensors, model expects {}", ckpt.tensors.len(), names.len())));
        }
        for name in names {
            model.copy_tensor(ckpt, &name)?;
        }
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    fn copy_tensor(&mut self, ckpt: &Checkpoint, name: &str) -> Result<()> {
        let src = ckpt.get(name).ok_or_else(|| Error::Load(format!("checkpoint lacks tensor {name}")))?;
        let dst = self.store.by_name_mut(name).expect("name from store");
        if dst.shape() != src.shape() {
            return Err(Error::Load(format!("tensor {name}: checkpoint shape {:?}, model shape {:?}", src.shape(), dst.shape())));
        }
        dst.data_mut().copy_from_slice(src.data());
        Ok(())
    }

    /// Loads stem and encoder-block tensors verbatim, leaving the head (and
    /// anything else) as initialized. Any checkpoint tensors outside the
    /// encoder, such as a decoder, are ignored.
    pub fn load_encoder(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let names: Vec<String> = self
            .store
            .entries()
            .filter(|(_, e)| is_encoder_tensor(&e.name))
            .map(|(_, e)| e.name.clone())
            .collect();
        for name in names {
            self.copy_tensor(ckpt, &name)?;
        }
        Ok(())
    }
}
