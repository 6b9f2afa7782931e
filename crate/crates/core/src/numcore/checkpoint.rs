//! Checkpoint files.
//!
//! Layout:
//!
//! ```text
//! BRCKPT1\n
//! <header byte length, decimal>\n
//! <header: pretty-printed JSON manifest>\n
//! <little-endian f64 blob>
//! ```
//!
//! The manifest lists every tensor as `{name, shape, trainable, offset}` where
//! `offset` is the byte offset of its first value inside the blob, plus a free
//! form `meta` object carrying model configuration.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &str = "BRCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: Value,
    pub entries: Vec<TensorEntry>,
    pub tensors: Vec<Tensor>,
}

pub fn encode_checkpoint(store: &ParamStore, meta: &Value) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(store.len());
    let mut blob = Vec::new();
    for (_, p) in store.iter() {
        entries.push(TensorEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            trainable: p.trainable,
            offset: blob.len(),
        });
        for v in p.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_string_pretty(&Header {
        meta: meta.clone(),
        tensors: entries,
    })
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(header.len() + blob.len() + 32);
    writeln!(out, "{MAGIC}").expect("vec write");
    writeln!(out, "{}", header.len()).expect("vec write");
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut lines = bytes.splitn(3, |b| *b == b'\n');
    let magic = lines.next().ok_or_else(|| bad("empty file"))?;
    if magic != MAGIC.as_bytes() {
        return Err(bad("missing BRCKPT1 magic"));
    }
    let len_line = lines.next().ok_or_else(|| bad("missing header length"))?;
    let header_len: usize = std::str::from_utf8(len_line)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| bad("malformed header length"))?;
    let rest = lines.next().ok_or_else(|| bad("missing header"))?;
    if rest.len() < header_len + 1 || rest[header_len] != b'\n' {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&rest[..header_len])
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let blob = &rest[header_len + 1..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 8;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!("{}: blob too short", e.name)));
        }
        let data = blob[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(e.shape.clone(), data).map_err(|err| Error::Checkpoint(format!("{}: {err}", e.name)))?);
    }
    Ok(Checkpoint {
        meta: header.meta,
        entries: header.tensors,
        tensors,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParamStore, meta: &Value) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(store, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

impl Checkpoint {
    /// Copies every tensor of `store` from the checkpoint; names, shapes and
    /// trainable flags must all match.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.entries.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.entries.len(),
                store.len()
            )));
        }
        for (entry, tensor) in self.entries.iter().zip(&self.tensors) {
            let id = store
                .id(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", entry.name)))?;
            if store.get(id).trainable != entry.trainable {
                return Err(Error::Checkpoint(format!("trainable flag differs for {}", entry.name)));
            }
            store
                .set_tensor(id, tensor.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }
}
