//! Offline passage index with exact maximum-inner-product search.
//!
//! # File layout (version 1, little endian)
//!
//! ```text
//! magic            4 bytes  "CQIX"
//! version          u32      1
//! n_passages       u64
//! dim              u64
//! encoder checksum 32 bytes SHA-256 of the passage encoder parameters
//! config hash      u32 length + UTF-8 bytes
//! embeddings       n_passages × dim f64, row-major
//! pid table        n_passages × (u32 length + UTF-8 bytes)
//! ```

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{encoder_checksum, read_exact_vec, Checksum};
use crate::corpus::{passage_sequence, PassageStore};
use crate::encoder::{embed, EncoderParams};
use crate::error::{Error, Result};
use crate::math::{dot, score_cmp};

const MAGIC: &[u8; 4] = b"CQIX";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPassage {
    pub pid: String,
    pub score: f64,
}

/// Passages in descending score order; ties broken by ascending pid.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ranked: Vec<ScoredPassage>,
}

impl RetrievalResult {
    pub fn pids(&self) -> impl Iterator<Item = &str> {
        self.ranked.iter().map(|s| s.pid.as_str())
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }

    pub fn contains(&self, pid: &str) -> bool {
        self.ranked.iter().any(|s| s.pid == pid)
    }
}

/// One embedding row per passage, rows ordered by pid.
#[derive(Debug, Clone, PartialEq)]
pub struct PassageIndex {
    ids: Vec<String>,
    dim: usize,
    matrix: Vec<f64>,
    encoder_checksum: Checksum,
    config_hash: String,
    rows: HashMap<String, usize>,
}

/// Encodes every passage with a frozen passage encoder.
pub fn build_index(encoder: &EncoderParams, passages: &PassageStore) -> PassageIndex {
    assert!(!passages.is_empty(), "cannot index an empty corpus");
    let mut ordered: Vec<_> = passages.iter().collect();
    ordered.sort_by(|a, b| a.pid.cmp(&b.pid));
    let rows: Vec<Vec<f64>> = ordered
        .par_iter()
        .map(|p| embed(encoder, &passage_sequence(p)).0)
        .collect();
    let ids: Vec<String> = ordered.iter().map(|p| p.pid.clone()).collect();
    PassageIndex::from_rows(ids, encoder.dim(), rows.concat(), encoder_checksum(encoder))
        .expect("rows built from the encoder have its dimension")
}

impl PassageIndex {
    /// Builds an index from raw rows. `ids` must be sorted ascending and
    /// distinct.
    pub fn from_rows(
        ids: Vec<String>,
        dim: usize,
        matrix: Vec<f64>,
        encoder_checksum: Checksum,
    ) -> Result<Self> {
        if matrix.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * dim,
                actual: matrix.len(),
            });
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidCorpus("index ids must be sorted and distinct".into()));
        }
        let rows = ids.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Ok(Self {
            ids,
            dim,
            matrix,
            encoder_checksum,
            config_hash: String::new(),
            rows,
        })
    }

    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = hash.into();
        self
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn encoder_checksum(&self) -> &Checksum {
        &self.encoder_checksum
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn embedding(&self, pid: &str) -> Option<&[f64]> {
        self.rows.get(pid).map(|&i| self.row(i))
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// Checksum over rows and ids; identifies this exact index.
    pub fn checksum(&self) -> Checksum {
        let mut parts: Vec<u8> = Vec::with_capacity(self.matrix.len() * 8);
        for v in &self.matrix {
            parts.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.ids {
            parts.extend_from_slice(id.as_bytes());
            parts.push(0);
        }
        Checksum::of_bytes(&parts)
    }

    /// The `k` highest inner products with `q`, by exhaustive scan.
    pub fn retrieve_top_k(&self, q: &[f64], k: usize) -> RetrievalResult {
        assert!(k >= 1, "k must be at least 1");
        assert_eq!(q.len(), self.dim, "query dimension");
        let scores: Vec<f64> = if self.ids.len() >= 4096 {
            self.matrix.par_chunks_exact(self.dim).map(|row| dot(q, row)).collect()
        } else {
            self.matrix.chunks_exact(self.dim).map(|row| dot(q, row)).collect()
        };
        // Rows are pid-sorted, so ascending row is ascending pid.
        let order = |a: &usize, b: &usize| -> Ordering {
            score_cmp(scores[*b], scores[*a]).then(a.cmp(b))
        };
        let mut rows: Vec<usize> = (0..self.ids.len()).collect();
        let k = k.min(rows.len());
        if k < rows.len() {
            rows.select_nth_unstable_by(k - 1, order);
            rows.truncate(k);
        }
        rows.sort_unstable_by(order);
        RetrievalResult {
            ranked: rows
                .into_iter()
                .map(|i| ScoredPassage {
                    pid: self.ids[i].clone(),
                    score: scores[i],
                })
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.dim as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&self.encoder_checksum.0).map_err(io)?;
        w.write_all(&(self.config_hash.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(self.config_hash.as_bytes()).map_err(io)?;
        for v in &self.matrix {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for id in &self.ids {
            w.write_all(&(id.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(id.as_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |message: &str| Error::BadArtifact {
            path: path.to_path_buf(),
            message: message.to_owned(),
        };
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut read = |n: usize| read_exact_vec(&mut r, n).map_err(|e| Error::io(path, e));
        if read(4)? != MAGIC {
            return Err(bad("not an index file"));
        }
        let version = u32::from_le_bytes(read(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported index version {version}")));
        }
        let n = u64::from_le_bytes(read(8)?.try_into().unwrap()) as usize;
        let dim = u64::from_le_bytes(read(8)?.try_into().unwrap()) as usize;
        let checksum = Checksum(read(32)?.try_into().unwrap());
        let hash_len = u32::from_le_bytes(read(4)?.try_into().unwrap()) as usize;
        let config_hash = String::from_utf8(read(hash_len)?).map_err(|_| bad("config hash is not UTF-8"))?;
        let payload = read(n * dim * 8)?;
        let matrix = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u32::from_le_bytes(read(4)?.try_into().unwrap()) as usize;
            ids.push(String::from_utf8(read(len)?).map_err(|_| bad("pid is not UTF-8"))?);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self::from_rows(ids, dim, matrix, checksum)?.with_config_hash(config_hash))
    }
}
