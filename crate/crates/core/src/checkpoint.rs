//! Parameter checkpoint container.
//!
//! # File layout (version 1, little endian)
//!
//! ```text
//! magic        4 bytes  "CQCK"
//! version      u32      1
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON:
//!              {"kind": str, "config_hash": str, "meta": any,
//!               "tensors": [{"name": str, "shape": [usize, ...]}, ...]}
//! payload      every tensor's f64 values, row-major, in header order
//! ```
//!
//! Values are stored as raw IEEE-754 doubles, so save/load is lossless.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CQCK";
const VERSION: u32 = 1;

/// SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Checksum(pub [u8; 32]);

impl Checksum {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn of_values<'a>(values: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut h = Sha256::new();
        for chunk in values {
            for v in chunk {
                h.update(v.to_le_bytes());
            }
        }
        Self(h.finalize().into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Self(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for Checksum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Checksum({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Checksum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn encoder_checksum(params: &EncoderParams) -> Checksum {
    let header = [params.dim() as f64, params.hash_buckets() as f64];
    Checksum::of_values([&header[..], params.embedding(), params.projection()])
}

pub(crate) fn read_exact_vec(r: &mut impl Read, n: usize) -> std::io::Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config_hash: String,
    meta: serde_json::Value,
    tensors: Vec<TensorHeader>,
}

/// Named tensors plus JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config_hash: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            config_hash: config_hash.into(),
            meta: serde_json::Value::Null,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape");
        self.tensors.push(Tensor {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::BadArtifact {
            path: Default::default(),
            message: format!("{} checkpoint has no tensor {name}", self.kind),
        })
    }

    pub fn push_encoder(&mut self, prefix: &str, params: &EncoderParams) {
        let (d, b) = (params.dim(), params.hash_buckets());
        self.push(format!("{prefix}.embedding"), vec![b, d], params.embedding().to_vec());
        self.push(format!("{prefix}.projection"), vec![d, d], params.projection().to_vec());
    }

    pub fn encoder(&self, prefix: &str) -> Result<EncoderParams> {
        let emb = self.require(&format!("{prefix}.embedding"))?;
        let proj = self.require(&format!("{prefix}.projection"))?;
        if emb.shape.len() != 2 || proj.shape.len() != 2 {
            return Err(Error::BadArtifact {
                path: Default::default(),
                message: format!("{prefix}: encoder tensors must be 2-d"),
            });
        }
        EncoderParams::from_parts(emb.shape[1], emb.shape[0], emb.data.clone(), proj.data.clone())
    }

    /// Digest of the tensor payload.
    pub fn checksum(&self) -> Checksum {
        Checksum::of_values(self.tensors.iter().map(|t| t.data.as_slice()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            config_hash: self.config_hash.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorHeader {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        })
        .expect("header serializes");
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        for t in &self.tensors {
            for v in &t.data {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |message: String| Error::BadArtifact {
            path: path.to_path_buf(),
            message,
        };
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut read = |n: usize| read_exact_vec(&mut r, n).map_err(|e| Error::io(path, e));
        if read(4)? != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(read(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u32::from_le_bytes(read(4)?.try_into().unwrap()) as usize;
        let header: Header =
            serde_json::from_slice(&read(header_len)?).map_err(|e| bad(e.to_string()))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for th in header.tensors {
            let n: usize = th.shape.iter().product();
            let bytes = read(n * 8)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor {
                name: th.name,
                shape: th.shape,
                data,
            });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after payload".into()));
        }
        Ok(Self {
            kind: header.kind,
            config_hash: header.config_hash,
            meta: header.meta,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_lossless(values in proptest::collection::vec(proptest::num::f64::ANY, 6), seed in 0u64..20) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.ckpt");
            let mut ck = Checkpoint::new("test", "h");
            ck.meta = serde_json::json!({"iteration": 3});
            ck.push("m", vec![2, 3], values.clone());
            ck.push_encoder("enc", &EncoderParams::random(3, 5, seed));
            ck.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            let bits = |t: &Tensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(back.tensors.len(), 3);
            for (a, b) in ck.tensors.iter().zip(&back.tensors) {
                prop_assert_eq!(bits(a), bits(b));
            }
            prop_assert_eq!(back.encoder("enc").unwrap(), EncoderParams::random(3, 5, seed));
            prop_assert_eq!(back.meta, ck.meta);
        }
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::BadArtifact { .. })));
    }

    #[test]
    fn checksum_hex_round_trip() {
        let c = Checksum::of_bytes(b"abc");
        assert_eq!(
            c.to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(Checksum::from_hex(&c.to_hex()), Some(c));
    }
}
