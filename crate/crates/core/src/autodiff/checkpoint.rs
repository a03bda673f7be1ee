//! Flat binary checkpoint format.
//!
//! ```text
//! "MTCCKPT1"
//! repeated until EOF:
//!   u32 LE  name length
//!   [u8]    UTF-8 name
//!   u32 LE  rank
//!   u32 LE  dims (rank of them)
//!   f64 LE  payload, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{MtcError, Result};

pub const MAGIC: &[u8; 8] = b"MTCCKPT1";

/// An ordered list of named tensors, as stored on disk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Looks up `name` and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self
            .get(name)
            .ok_or_else(|| MtcError::Checkpoint(format!("missing entry {name}")))?;
        if t.shape() != shape {
            return Err(MtcError::Checkpoint(format!(
                "entry {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| MtcError::Checkpoint(msg.to_string());
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut cursor = &bytes[MAGIC.len()..];
        let mut entries = Vec::new();
        let read_u32 = |c: &mut &[u8]| -> Result<u32> {
            let mut buf = [0u8; 4];
            c.read_exact(&mut buf).map_err(|_| bad("truncated header"))?;
            Ok(u32::from_le_bytes(buf))
        };
        while !cursor.is_empty() {
            let len = read_u32(&mut cursor)? as usize;
            if cursor.len() < len {
                return Err(bad("truncated name"));
            }
            let name = std::str::from_utf8(&cursor[..len])
                .map_err(|_| bad("name is not UTF-8"))?
                .to_string();
            cursor = &cursor[len..];
            let rank = read_u32(&mut cursor)? as usize;
            let dims = (0..rank)
                .map(|_| read_u32(&mut cursor).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            if cursor.len() < numel * 8 {
                return Err(bad("truncated payload"));
            }
            let data = cursor[..numel * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor = &cursor[numel * 8..];
            let tensor = Tensor::new(dims, data).map_err(|e| MtcError::Checkpoint(format!("{name}: {e}")))?;
            entries.push((name, tensor));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
