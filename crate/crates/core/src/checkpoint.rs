//! Self-describing tensor container.
//!
//! Layout: the 8-byte magic `PMFACKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a UTF-8 JSON header, then the payload
//! of little-endian `f64` values. The header holds the configuration text, a
//! string map of metadata, and one manifest entry per tensor:
//!
//! ```json
//! {"name": "blocks.0.attn.q.weight", "dtype": "f64", "shape": [64, 64],
//!  "offset": 0, "length": 32768, "kind": "weight", "trainable": true}
//! ```
//!
//! `offset` and `length` are in bytes from the start of the payload. `kind`
//! is `weight`, `buffer` or `state` (optimizer moments, embeddings and other
//! non-model tensors).

use std::collections::BTreeMap;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PMFACKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore<f64>,
    pub state: IndexMap<String, Tensor<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
    kind: String,
    #[serde(default)]
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: String,
    meta: BTreeMap<String, String>,
    tensors: Vec<Entry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push = |name: &str, t: &Tensor<f64>, kind: &str, trainable: bool| {
            entries.push(Entry {
                name: name.to_string(),
                dtype: "f64".into(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
                length: 8 * t.numel() as u64,
                kind: kind.into(),
                trainable,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, p) in self.params.iter() {
            let kind = match p.kind {
                ParamKind::Weight => "weight",
                ParamKind::Buffer => "buffer",
            };
            push(name, &p.value, kind, p.trainable);
        }
        for (name, t) in &self.state {
            push(name, t, "state", false);
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let hend = usize::try_from(hlen)
            .ok()
            .and_then(|h| h.checked_add(20))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("header length {hlen} exceeds file")))?;
        let header: Header = serde_json::from_slice(&bytes[20..hend]).map_err(|e| bad(format!("header: {e}")))?;
        let payload = &bytes[hend..];
        let mut ck = Checkpoint {
            config: header.config,
            meta: header.meta,
            ..Default::default()
        };
        for e in header.tensors {
            if e.dtype != "f64" {
                return Err(bad(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            let end = e.offset.checked_add(e.length);
            if e.length != 8 * numel as u64 || end.is_none_or(|end| end > payload.len() as u64) {
                return Err(bad(format!(
                    "tensor `{}` extent {}+{} invalid for shape {:?} and payload {}",
                    e.name,
                    e.offset,
                    e.length,
                    e.shape,
                    payload.len()
                )));
            }
            let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| bad(format!("tensor `{}`: {err}", e.name)))?;
            match e.kind.as_str() {
                "weight" => {
                    ck.params.insert(e.name.clone(), t, ParamKind::Weight);
                    ck.params.set_trainable(&e.name, e.trainable)?;
                }
                "buffer" => ck.params.insert(e.name, t, ParamKind::Buffer),
                "state" => {
                    ck.state.insert(e.name, t);
                }
                other => return Err(bad(format!("tensor `{}` has unknown kind `{other}`", e.name))),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::format(path, m),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint {
            config: "seed = 1\n".into(),
            ..Default::default()
        };
        ck.meta.insert("epoch".into(), "3".into());
        ck.params.insert_weight("a", Tensor::from_fn(&[2, 3], |i| (i as f64).sin() * 1e-300));
        ck.params.insert_buffer("b", Tensor::from_vec(vec![f64::MIN_POSITIVE, -0.0]));
        ck.params.set_trainable("a", false).unwrap();
        ck.state.insert("adam.m.a".into(), Tensor::from_vec(vec![1.5]));
        ck
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.state, ck.state);
        for ((n1, p1), (n2, p2)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!((p1.kind, p1.trainable), (p2.kind, p2.trainable));
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&p1.value), bits(&p2.value));
        }
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT0000000000000000").is_err());
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(Checkpoint::from_bytes(&v2).is_err());
    }
}
