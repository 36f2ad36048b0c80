//! Versioned binary container for named `f32` arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "FRCKPT\0\0"
//! version  u32       currently 1
//! hlen     u64       byte length of the JSON header
//! header   hlen      {"kind", "meta", "arrays": [{"name", "shape", "offset", "len"}]}
//! payload  ...       f32 values; array i occupies [offset, offset + len) in elements
//! ```
//!
//! Key schema used by the models in this crate:
//!
//! * `param/<layer>.<weight|bias>`: trainable parameters.
//! * `opt.v/<layer>.<weight|bias>`: optimiser second moments (trainer only).
//!
//! `meta` carries architecture hyper-parameters and run state (step, seed,
//! calibration constants) as free-form JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;

pub const MAGIC: &[u8; 8] = b"FRCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            arrays: Vec::new(),
        }
    }

    /// Appends every entry of `params` under `prefix/`.
    pub fn push_params(&mut self, prefix: &str, params: &ParamSet<f32>) {
        for e in params.entries() {
            self.arrays.push(NamedArray {
                name: format!("{prefix}/{}", e.name),
                shape: e.shape.clone(),
                data: e.data.clone(),
            });
        }
    }

    /// Fills `params` from the arrays under `prefix/`, matching by name and
    /// shape.
    pub fn read_params(&self, prefix: &str, params: &mut ParamSet<f32>) -> Result<()> {
        let mut found = ParamSet::<f32>::new();
        let pre = format!("{prefix}/");
        for a in &self.arrays {
            if let Some(name) = a.name.strip_prefix(&pre) {
                found.add(name, a.shape.clone(), a.data.clone());
            }
        }
        params.load_from(&found)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let arrays = self
            .arrays
            .iter()
            .map(|a| {
                let h = ArrayHeader {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    offset,
                    len: a.data.len(),
                };
                offset += a.data.len();
                h
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays,
        })
        .map_err(|e| Error::format("checkpoint header", e))?;
        let mut out = Vec::with_capacity(20 + header.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("checkpoint", d);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::format("checkpoint header", e))?;
        let payload = &bytes[20 + hlen..];
        let arrays = header
            .arrays
            .into_iter()
            .map(|a| {
                if a.shape.iter().product::<usize>() != a.len {
                    return Err(bad(&format!("array {} shape/len mismatch", a.name)));
                }
                let raw = payload
                    .get(a.offset * 4..(a.offset + a.len) * 4)
                    .ok_or_else(|| bad(&format!("array {} out of bounds", a.name)))?;
                Ok(NamedArray {
                    name: a.name,
                    shape: a.shape,
                    data: raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }

    /// Writes atomically (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::format(
                "checkpoint",
                format!("expected a {kind} checkpoint, found {}", self.kind),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_roundtrip(values in proptest::collection::vec(-1e6f32..1e6, 0..40), step in 0u64..1000) {
            let mut ck = Checkpoint::new("test", serde_json::json!({"step": step}));
            let mut ps = ParamSet::<f32>::new();
            ps.add("a.weight", vec![values.len()], values.clone());
            ps.add("a.bias", vec![1], vec![0.5]);
            ck.push_params("param", &ps);
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(&back, &ck);
            let mut target = ps.zeros_like();
            back.read_params("param", &mut target).unwrap();
            prop_assert_eq!(target, ps);
        }
    }

    #[test]
    fn rejects_garbage_and_wrong_kind() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
        let ck = Checkpoint::new("encoder", serde_json::Value::Null);
        assert!(ck.expect_kind("velocity").is_err());
    }
}
