//! Run configuration: every hyperparameter in one JSON document.
//!
//! Fields can be overridden by dotted name (`retrieval.t=3`). The value is
//! parsed as JSON when possible and as a bare string otherwise.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::corpus::SyntheticCorpusConfig;
use crate::encoder::{DEFAULT_DIM, DEFAULT_HASH_BUCKETS};
use crate::error::{Error, Result};
use crate::optim::OptimizerKind;
use crate::postranker::{PostRankerMargins, DEFAULT_BETA, DEFAULT_DELTA, DEFAULT_MU};
use crate::reader::{DEFAULT_MAX_SPAN_LEN, DEFAULT_TOP_SPANS};
use crate::retriever::PretrainConfig;

pub const DEFAULT_PRETRAIN_LR: f64 = 1e-2;
pub const DEFAULT_K: usize = 100;
pub const DEFAULT_T: usize = 5;
pub const DEFAULT_WINDOW: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub seed: u64,
    pub n_conversations: usize,
    pub turns_per_conv: usize,
    pub n_passages: usize,
    pub vocab_size: usize,
    pub dev_conversations: usize,
    pub test_conversations: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            seed: 7,
            n_conversations: 500,
            turns_per_conv: 4,
            n_passages: 10_000,
            vocab_size: 4_000,
            dev_conversations: 100,
            test_conversations: 50,
        }
    }
}

impl CorpusSection {
    pub fn synthetic(&self) -> SyntheticCorpusConfig {
        SyntheticCorpusConfig {
            seed: self.seed,
            n_conversations: self.n_conversations,
            turns_per_conv: self.turns_per_conv,
            n_passages: self.n_passages,
            vocab_size: self.vocab_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub dim: usize,
    pub hash_buckets: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            hash_buckets: DEFAULT_HASH_BUCKETS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub alpha: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub steps: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            lr: DEFAULT_PRETRAIN_LR,
            steps: 9_600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub k: usize,
    pub t: usize,
    pub window: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            t: DEFAULT_T,
            window: DEFAULT_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostRankerSection {
    pub enabled: bool,
    pub delta: f64,
    pub mu: f64,
    pub beta: f64,
}

impl Default for PostRankerSection {
    fn default() -> Self {
        Self {
            enabled: true,
            delta: DEFAULT_DELTA,
            mu: DEFAULT_MU,
            beta: DEFAULT_BETA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSection {
    /// When false the golden passage is injected on every iteration.
    pub enabled: bool,
    pub lambda_lower: f64,
    pub lambda_upper: f64,
}

impl Default for CurriculumSection {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda_lower: 1.0,
            lambda_upper: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointSection {
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub iterations: usize,
    pub lr_retriever: f64,
    pub lr_postranker: f64,
    pub lr_reader: f64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for JointSection {
    fn default() -> Self {
        Self {
            batch_size: 8,
            optimizer: OptimizerKind::Adam,
            iterations: 400,
            lr_retriever: 1e-3,
            lr_postranker: 1e-4,
            lr_reader: 1e-2,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReaderSection {
    pub max_span_len: usize,
    pub top_n: usize,
}

impl Default for ReaderSection {
    fn default() -> Self {
        Self {
            max_span_len: DEFAULT_MAX_SPAN_LEN,
            top_n: DEFAULT_TOP_SPANS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub stopwords_path: Option<String>,
    pub human_f1: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            stopwords_path: None,
            human_f1: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization and every training-time random choice.
    pub seed: u64,
    pub corpus: CorpusSection,
    pub encoder: EncoderSection,
    pub pretrain: PretrainSection,
    pub retrieval: RetrievalSection,
    pub postranker: PostRankerSection,
    pub curriculum: CurriculumSection,
    pub joint: JointSection,
    pub reader: ReaderSection,
    pub metrics: MetricsSection,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::BadArtifact {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Sets one field by dotted path, e.g. `curriculum.lambda_upper=6`.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "expected key=value"))?;
        let key = key.trim();
        let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_owned()));
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::config(key, "no such field"))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| Error::config(key, e.to_string()))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.retrieval;
        if r.k == 0 {
            return Err(Error::config("K", "must be at least 1"));
        }
        if r.t == 0 {
            return Err(Error::config("T", "must be at least 1"));
        }
        if r.t > r.k {
            return Err(Error::config("T", format!("T = {} exceeds K = {}", r.t, r.k)));
        }
        let c = &self.curriculum;
        if !(c.lambda_lower < c.lambda_upper) {
            return Err(Error::config(
                "lambda_lower",
                format!("{} must be below lambda_upper = {}", c.lambda_lower, c.lambda_upper),
            ));
        }
        if !(0.0..=1.0).contains(&self.pretrain.alpha) {
            return Err(Error::config("alpha", "must lie in [0, 1]"));
        }
        if self.encoder.dim < 2 {
            return Err(Error::config("dim", "must be at least 2"));
        }
        if self.encoder.hash_buckets == 0 {
            return Err(Error::config("hash_buckets", "must be positive"));
        }
        for (name, v) in [
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("joint.batch_size", self.joint.batch_size),
            ("max_span_len", self.reader.max_span_len),
            ("top_n", self.reader.top_n),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        for (name, v) in [
            ("pretrain.lr", self.pretrain.lr),
            ("joint.lr_retriever", self.joint.lr_retriever),
            ("joint.lr_postranker", self.joint.lr_postranker),
            ("joint.lr_reader", self.joint.lr_reader),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, "must be a finite non-negative number"));
            }
        }
        let p = &self.postranker;
        for (name, v) in [("delta", p.delta), ("mu", p.mu), ("beta", p.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, "must be a finite non-negative number"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical (key-sorted, compact) JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(&serde_json::to_value(self).expect("config serializes"))
            .expect("value serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            alpha: self.pretrain.alpha,
            batch_size: self.pretrain.batch_size,
            lr: self.pretrain.lr,
            steps: self.pretrain.steps,
            seed: self.seed,
            optimizer: self.pretrain.optimizer,
        }
    }

    pub fn margins(&self) -> PostRankerMargins {
        PostRankerMargins {
            delta: self.postranker.delta,
            mu: self.postranker.mu,
            beta: self.postranker.beta,
        }
    }
}
