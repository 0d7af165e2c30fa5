//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SBCIT1\0"                       magic, 7 bytes
//! u32                              entry count
//! per entry:
//!   u16 name length, UTF-8 name
//!   u8 rank, u32 × rank dims
//!   f32 × numel payload
//! u32                              CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use sbcit_tensor::{ParameterStore, Tensor};

use crate::model::Model;
use crate::config::ModelConfig;
use crate::{Error, Result};

pub const MAGIC: &[u8; 7] = b"SBCIT1\0";

fn entry_error(name: &str, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        name: name.to_string(),
        reason: reason.into(),
    }
}

pub fn encode_checkpoint(store: &ParameterStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| entry_error(&p.name, "name longer than 65535 bytes"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.value.shape();
        let rank = u8::try_from(shape.len()).map_err(|_| entry_error(&p.name, "rank above 255"))?;
        out.push(rank);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| entry_error(&p.name, "dimension above u32::MAX"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, entry: &str, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(entry_error(entry, format!("file truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, entry: &str, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, entry, what)?.try_into().expect("4 bytes")))
    }
}

/// Decodes a checkpoint; every entry is marked trainable.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParameterStore<f32>> {
    const HEADER: &str = "<header>";
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(entry_error(HEADER, "bad magic; not an SBCIT1 checkpoint"));
    }
    if bytes.len() < MAGIC.len() + 8 {
        return Err(entry_error(HEADER, "file truncated"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let count = r.u32(HEADER, "the entry count")?;
    let mut store = ParameterStore::new();
    for index in 0..count {
        let placeholder = format!("#{index}");
        let len = u16::from_le_bytes(r.take(2, &placeholder, "a name length")?.try_into().expect("2 bytes"));
        let name = std::str::from_utf8(r.take(len as usize, &placeholder, "a name")?)
            .map_err(|_| entry_error(&placeholder, "name is not UTF-8"))?
            .to_string();
        let rank = r.take(1, &name, "the rank")?[0] as usize;
        let shape = (0..rank)
            .map(|_| r.u32(&name, "the dimensions").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes_needed = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| entry_error(&name, "dimensions overflow"))?;
        let payload = r.take(bytes_needed, &name, "the payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| entry_error(&name, e.to_string()))?;
        store.add(name.clone(), t, true).map_err(|e| entry_error(&name, e.to_string()))?;
    }
    if r.pos != body.len() {
        return Err(entry_error(HEADER, format!("{} unexpected bytes after the last entry", body.len() - r.pos)));
    }
    let actual = crc32fast::hash(body);
    if actual != stored {
        return Err(entry_error(HEADER, format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParameterStore<f32>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(store)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterStore<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and checks it against `config`.
pub fn load_model(path: &Path, config: ModelConfig) -> Result<Model> {
    Model::from_params(config, load_checkpoint(path)?)
}
