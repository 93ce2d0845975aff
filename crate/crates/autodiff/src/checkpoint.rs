//! Single-file tensor checkpoints.
//!
//! Layout:
//!
//! ```text
//! 8 bytes   magic "FGCKPT01"
//! 8 bytes   manifest length L, little-endian u64
//! L bytes   UTF-8 JSON manifest {"meta": ..., "tensors": [{"name", "offset", "shape"}]}
//! ...       raw little-endian f64 data; `offset` is in bytes from the start of this section
//! ```
//!
//! Writing is deterministic (JSON object keys are sorted), so reading a file
//! and writing it back reproduces it byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FGCKPT01";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            entries.push(json!({ "name": name, "shape": t.shape(), "offset": offset }));
            offset += t.numel() * 8;
        }
        let manifest = json!({ "meta": self.meta, "tensors": entries });
        let bytes = serde_json::to_vec(&manifest).map_err(|e| bad(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(&bytes)?;
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut manifest = vec![0u8; len];
        r.read_exact(&mut manifest)?;
        let manifest: Value = serde_json::from_slice(&manifest).map_err(|e| bad(e.to_string()))?;
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;

        let meta = manifest.get("meta").cloned().unwrap_or(Value::Null);
        let entries = manifest
            .get("tensors")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("manifest has no tensor list"))?;
        let mut tensors = Vec::with_capacity(entries.len());
        let mut expected_offset = 0usize;
        for e in entries {
            let name = e
                .get("name")
                .and_then(Value::as_str)
                .ok_or_else(|| bad("tensor entry without name"))?;
            let shape: Vec<usize> = e
                .get("shape")
                .and_then(Value::as_array)
                .ok_or_else(|| bad(format!("{name}: no shape")))?
                .iter()
                .map(|d| d.as_u64().map(|d| d as usize).ok_or_else(|| bad(format!("{name}: bad dim"))))
                .collect::<Result<_>>()?;
            let offset = e
                .get("offset")
                .and_then(Value::as_u64)
                .ok_or_else(|| bad(format!("{name}: no offset")))? as usize;
            if offset != expected_offset {
                return Err(bad(format!("{name}: offset {offset}, expected {expected_offset}")));
            }
            let n: usize = shape.iter().product();
            let end = offset + n * 8;
            let raw = data
                .get(offset..end)
                .ok_or_else(|| bad(format!("{name}: data truncated")))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name.to_string(), Tensor::new(shape, values)?));
            expected_offset = end;
        }
        if expected_offset != data.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = File::create(path)?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
