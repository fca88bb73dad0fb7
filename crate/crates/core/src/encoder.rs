//! Hashed bag-of-words encoder with a learned projection.
//!
//! `encode(seq) = tanh(P · mean_t E[hash(t)])`, where `E` is a
//! `hash_buckets × dim` table and `P` a `dim × dim` matrix. Tokens hash with
//! 64-bit FNV-1a over their UTF-8 bytes, so bucket assignment is stable across
//! runs and platforms. Marker tokens hash like any other token.
//!
//! Gradients are accumulated into an [`EncoderGrad`], which keeps only the
//! embedding rows that were touched.

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::ops::Deref;

use fnv::FnvHasher;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::math::dot;

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_HASH_BUCKETS: usize = 65_536;

/// Bucket of a token under FNV-1a 64.
pub fn token_bucket(token: &str, hash_buckets: usize) -> u32 {
    let mut h = FnvHasher::default();
    h.write(token.as_bytes());
    (h.finish() % hash_buckets as u64) as u32
}

/// Dense output of an encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl Deref for EmbeddingVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for EmbeddingVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Inner product of two embeddings.
pub fn similarity(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::DimensionMismatch {
            expected: q.len(),
            actual: p.len(),
        });
    }
    Ok(dot(q, p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    dim: usize,
    hash_buckets: usize,
    /// Row-major `hash_buckets × dim`.
    pub(crate) embedding: Vec<f64>,
    /// Row-major `dim × dim`.
    pub(crate) projection: Vec<f64>,
}

impl EncoderParams {
    /// Uniform initialization in `±1/sqrt(dim)`.
    pub fn random(dim: usize, hash_buckets: usize, seed: u64) -> Self {
        assert!(dim >= 2, "encoder dim must be at least 2");
        assert!(hash_buckets >= 1);
        let bound = 1.0 / (dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = (0..hash_buckets * dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let projection = (0..dim * dim).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            dim,
            hash_buckets,
            embedding,
            projection,
        }
    }

    pub fn zeros(dim: usize, hash_buckets: usize) -> Self {
        Self {
            dim,
            hash_buckets,
            embedding: vec![0.0; hash_buckets * dim],
            projection: vec![0.0; dim * dim],
        }
    }

    pub fn from_parts(
        dim: usize,
        hash_buckets: usize,
        embedding: Vec<f64>,
        projection: Vec<f64>,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::config("dim", "must be at least 2"));
        }
        if embedding.len() != hash_buckets * dim {
            return Err(Error::DimensionMismatch {
                expected: hash_buckets * dim,
                actual: embedding.len(),
            });
        }
        if projection.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                actual: projection.len(),
            });
        }
        Ok(Self {
            dim,
            hash_buckets,
            embedding,
            projection,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hash_buckets(&self) -> usize {
        self.hash_buckets
    }

    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn embedding_mut(&mut self) -> &mut [f64] {
        &mut self.embedding
    }

    pub fn projection_mut(&mut self) -> &mut [f64] {
        &mut self.projection
    }

    pub fn row(&self, bucket: u32) -> &[f64] {
        let start = bucket as usize * self.dim;
        &self.embedding[start..start + self.dim]
    }

    pub fn bucket(&self, token: &str) -> u32 {
        token_bucket(token, self.hash_buckets)
    }

    /// `P · v`
    pub(crate) fn project(&self, v: &[f64]) -> Vec<f64> {
        self.projection.chunks_exact(self.dim).map(|row| dot(row, v)).collect()
    }

    /// `Pᵀ · g`
    pub(crate) fn project_transpose(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (row, gi) in self.projection.chunks_exact(self.dim).zip(g) {
            if *gi != 0.0 {
                crate::math::axpy(&mut out, *gi, row);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.embedding.iter().chain(&self.projection).all(|v| v.is_finite())
    }

    /// Applies `params -= lr * grad`.
    pub fn apply(&mut self, grad: &EncoderGrad, lr: f64) {
        assert_eq!(grad.dim, self.dim);
        for (&bucket, row) in &grad.embedding {
            let start = bucket as usize * self.dim;
            crate::math::axpy(&mut self.embedding[start..start + self.dim], -lr, row);
        }
        crate::math::axpy(&mut self.projection, -lr, &grad.projection);
    }
}

/// What [`backprop`] needs from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeTrace {
    pub buckets: Vec<u32>,
    pub pooled: Vec<f64>,
    pub output: Vec<f64>,
}

/// Forward pass. Panics on an empty sequence.
pub fn encode(params: &EncoderParams, seq: &TokenSequence) -> (EmbeddingVector, EncodeTrace) {
    assert!(!seq.is_empty(), "cannot encode an empty sequence");
    let buckets: Vec<u32> = seq.tokens().iter().map(|t| params.bucket(t)).collect();
    let mut pooled = vec![0.0; params.dim];
    for &b in &buckets {
        crate::math::axpy(&mut pooled, 1.0, params.row(b));
    }
    let inv = 1.0 / buckets.len() as f64;
    pooled.iter_mut().for_each(|v| *v *= inv);
    let output: Vec<f64> = params.project(&pooled).into_iter().map(f64::tanh).collect();
    (
        EmbeddingVector(output.clone()),
        EncodeTrace {
            buckets,
            pooled,
            output,
        },
    )
}

/// Forward pass without a trace.
pub fn embed(params: &EncoderParams, seq: &TokenSequence) -> EmbeddingVector {
    encode(params, seq).0
}

/// Sparse gradient for one [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrad {
    dim: usize,
    pub embedding: BTreeMap<u32, Vec<f64>>,
    pub projection: Vec<f64>,
}

impl EncoderGrad {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            embedding: BTreeMap::new(),
            projection: vec![0.0; dim * dim],
        }
    }

    pub fn for_params(params: &EncoderParams) -> Self {
        Self::new(params.dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row_mut(&mut self, bucket: u32) -> &mut Vec<f64> {
        let dim = self.dim;
        self.embedding.entry(bucket).or_insert_with(|| vec![0.0; dim])
    }

    pub fn add_assign(&mut self, other: &EncoderGrad) {
        assert_eq!(self.dim, other.dim);
        for (&b, row) in &other.embedding {
            crate::math::axpy(self.row_mut(b), 1.0, row);
        }
        crate::math::axpy(&mut self.projection, 1.0, &other.projection);
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.embedding.values_mut() {
            row.iter_mut().for_each(|v| *v *= factor);
        }
        self.projection.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn is_zero(&self) -> bool {
        self.embedding.values().flatten().chain(&self.projection).all(|v| *v == 0.0)
    }

    /// Densified embedding gradient, `hash_buckets × dim`.
    pub fn dense_embedding(&self, hash_buckets: usize) -> Vec<f64> {
        let mut out = vec![0.0; hash_buckets * self.dim];
        for (&b, row) in &self.embedding {
            let start = b as usize * self.dim;
            out[start..start + self.dim].copy_from_slice(row);
        }
        out
    }
}

/// Accumulates `(∂output/∂params)ᵀ · grad_out` into `accum`.
pub fn backprop(
    params: &EncoderParams,
    trace: &EncodeTrace,
    grad_out: &[f64],
    accum: &mut EncoderGrad,
) -> Result<()> {
    let dim = params.dim;
    for len in [grad_out.len(), trace.output.len(), trace.pooled.len(), accum.dim] {
        if len != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: len,
            });
        }
    }
    if grad_out.iter().all(|g| *g == 0.0) {
        return Ok(());
    }
    // through tanh
    let grad_h: Vec<f64> = grad_out
        .iter()
        .zip(&trace.output)
        .map(|(g, y)| g * (1.0 - y * y))
        .collect();
    for (row, gh) in accum.projection.chunks_exact_mut(dim).zip(&grad_h) {
        crate::math::axpy(row, *gh, &trace.pooled);
    }
    let grad_pooled = params.project_transpose(&grad_h);
    let share = 1.0 / trace.buckets.len() as f64;
    for &b in &trace.buckets {
        crate::math::axpy(accum.row_mut(b), share, &grad_pooled);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(s: &str) -> TokenSequence {
        TokenSequence::from_words(s)
    }

    #[test]
    fn zero_table_gives_zero_output() {
        let params = EncoderParams::zeros(4, 16);
        let (v, _) = encode(&params, &seq("[CLS] a b [SEP]"));
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn encode_is_deterministic() {
        let params = EncoderParams::random(8, 64, 3);
        assert_eq!(encode(&params, &seq("x y z")), encode(&params, &seq("x y z")));
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(similarity(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert!(matches!(
            similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn fnv_buckets_are_stable() {
        // FNV-1a 64 of "a" is 0xaf63dc4c8601ec8c.
        assert_eq!(token_bucket("a", u32::MAX as usize + 1), 0x8601ec8c);
        assert_eq!(token_bucket("", 1 << 20), (0xcbf29ce484222325u64 % (1 << 20)) as u32);
    }

    #[test]
    fn zero_grad_leaves_accumulator_unchanged() {
        let params = EncoderParams::random(4, 16, 1);
        let (_, trace) = encode(&params, &seq("a b c"));
        let mut acc = EncoderGrad::new(4);
        backprop(&params, &trace, &[0.0; 4], &mut acc).unwrap();
        assert!(acc.is_zero());
        assert!(acc.embedding.is_empty());
    }

    #[test]
    fn backprop_is_linear() {
        let params = EncoderParams::random(4, 16, 1);
        let (_, trace) = encode(&params, &seq("a b c a"));
        let g1 = [0.3, -0.1, 0.2, 0.5];
        let g2 = [-0.7, 0.4, 0.0, 0.1];
        let mut both = EncoderGrad::new(4);
        backprop(&params, &trace, &g1, &mut both).unwrap();
        backprop(&params, &trace, &g2, &mut both).unwrap();
        let sum: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        let mut once = EncoderGrad::new(4);
        backprop(&params, &trace, &sum, &mut once).unwrap();
        for (a, b) in both.dense_embedding(16).iter().zip(once.dense_embedding(16)) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in both.projection.iter().zip(&once.projection) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backprop_rejects_shape_mismatch() {
        let params = EncoderParams::random(4, 16, 1);
        let (_, trace) = encode(&params, &seq("a"));
        let mut acc = EncoderGrad::new(3);
        assert!(backprop(&params, &trace, &[1.0; 4], &mut acc).is_err());
    }

    proptest! {
        #[test]
        fn mean_pooling_ignores_order(mut words in proptest::collection::vec("[a-e]{1,3}", 1..8), seed in 0u64..50) {
            let params = EncoderParams::random(6, 32, seed);
            let a = embed(&params, &TokenSequence(words.clone()));
            words.reverse();
            let b = embed(&params, &TokenSequence(words));
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn outputs_stay_in_tanh_range(words in proptest::collection::vec("[a-z]{1,4}", 1..10), seed in 0u64..50) {
            let params = EncoderParams::random(8, 64, seed);
            let v = embed(&params, &TokenSequence(words));
            prop_assert!(v.iter().all(|x| x.abs() < 1.0 && x.is_finite()));
        }
    }
}
