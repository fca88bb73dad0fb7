//! Retriever pre-training with in-batch negatives, one hard negative per
//! question and a symmetric-KL consistency term between the original
//! question and its rewrite.
//!
//! For question `i` with candidate scores `s = q_or·p` and `r = q_rw·p`, the
//! loss is
//!
//! ```text
//! L_i = -(ln softmax(s)[+] + ln softmax(r)[+]) / 2  +  α · (KL(P‖R) + KL(R‖P)) / 2
//! ```
//!
//! averaged over the batch. The symmetric KL of two softmaxes equals
//! `Σ_k (P_k - R_k)(s_k - r_k)`, which gives the closed-form score gradients
//! used below.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{kl_regularizer, nll_loss, Distribution};
use crate::corpus::{
    passage_sequence, rewrite_sequence, serialize_or, Corpus, PassageStore, TokenSequence,
};
use crate::encoder::{backprop, encode, EncodeTrace, EncoderGrad, EncoderParams};
use crate::error::{Error, Result};
use crate::math::{axpy, dot, softmax};
use crate::metrics::DEFAULT_STOPWORDS;
use crate::optim::{Optimizer, OptimizerKind};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainInstance {
    pub qid: String,
    pub q_or: TokenSequence,
    pub q_rw: TokenSequence,
    pub positive: String,
    pub hard_negative: String,
}

/// Picks the non-golden passage sharing the most distinct non-stopword
/// tokens with a query. Ties go to the lower pid.
pub struct HardNegativeMiner<'a> {
    passages: &'a PassageStore,
    postings: HashMap<&'a str, Vec<usize>>,
    stopwords: HashSet<&'static str>,
}

impl<'a> HardNegativeMiner<'a> {
    pub fn new(passages: &'a PassageStore) -> Self {
        let stopwords: HashSet<&'static str> = DEFAULT_STOPWORDS.iter().copied().collect();
        let mut postings: HashMap<&'a str, Vec<usize>> = HashMap::new();
        for (i, p) in passages.iter().enumerate() {
            let distinct: HashSet<&str> = p.tokens.iter().map(String::as_str).collect();
            for tok in distinct {
                if !stopwords.contains(tok) {
                    postings.entry(tok).or_default().push(i);
                }
            }
        }
        Self {
            passages,
            postings,
            stopwords,
        }
    }

    pub fn mine(&self, query: &[String], golden: &str) -> Option<String> {
        let distinct: HashSet<&str> = query
            .iter()
            .map(String::as_str)
            .filter(|t| !self.stopwords.contains(t))
            .collect();
        let mut overlap: HashMap<usize, usize> = HashMap::new();
        for tok in distinct {
            for &i in self.postings.get(tok).into_iter().flatten() {
                *overlap.entry(i).or_default() += 1;
            }
        }
        let all = self.passages.as_slice();
        let best = overlap
            .into_iter()
            .filter(|(i, _)| all[*i].pid != golden)
            .max_by(|(ia, ca), (ib, cb)| ca.cmp(cb).then_with(|| all[*ib].pid.cmp(&all[*ia].pid)));
        match best {
            Some((i, _)) => Some(all[i].pid.clone()),
            None => all
                .iter()
                .filter(|p| p.pid != golden)
                .map(|p| &p.pid)
                .min()
                .cloned(),
        }
    }
}

/// One instance per turn: serialized original question, rewrite, golden
/// passage and mined hard negative.
pub fn build_pretrain_instances(corpus: &Corpus, window: usize) -> Result<Vec<PretrainInstance>> {
    if corpus.passages().len() < 2 {
        return Err(Error::InvalidCorpus("pre-training needs at least two passages".into()));
    }
    let miner = HardNegativeMiner::new(corpus.passages());
    let mut out = Vec::with_capacity(corpus.n_turns());
    for conv in corpus.conversations() {
        for (t, turn) in conv.turns.iter().enumerate() {
            let hard_negative = miner
                .mine(&turn.rewrite_tokens, &turn.golden_pid)
                .expect("at least two passages");
            out.push(PretrainInstance {
                qid: turn.qid.clone(),
                q_or: serialize_or(conv, t, window),
                q_rw: rewrite_sequence(conv, t),
                positive: turn.golden_pid.clone(),
                hard_negative,
            });
        }
    }
    Ok(out)
}

/// Candidate pids per question: own positive (always first), own hard
/// negative, then every other question's positive and hard negative. Repeated
/// pids keep their first occurrence, so a question's own positive is never
/// also counted as one of its negatives.
pub fn candidate_sets(batch: &[PretrainInstance]) -> Vec<Vec<String>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, own)| {
            let others = batch
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, o)| [&o.positive, &o.hard_negative]);
            let mut seen = HashSet::new();
            [&own.positive, &own.hard_negative]
                .into_iter()
                .chain(others)
                .filter(|pid| seen.insert(pid.as_str()))
                .cloned()
                .collect()
        })
        .collect()
}

/// Pre-training loss and gradients on raw embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPretrainLoss {
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub grad_q_or: Vec<Vec<f64>>,
    pub grad_q_rw: Vec<Vec<f64>>,
    pub grad_passages: Vec<Vec<f64>>,
}

/// `candidates[i]` indexes into `passages`, with the positive at position 0.
pub fn pretrain_loss_on_embeddings(
    q_or: &[Vec<f64>],
    q_rw: &[Vec<f64>],
    passages: &[Vec<f64>],
    candidates: &[Vec<usize>],
    alpha: f64,
) -> EmbeddingPretrainLoss {
    let b = q_or.len();
    assert!(b > 0 && q_rw.len() == b && candidates.len() == b);
    let dim = q_or[0].len();
    let scale = 1.0 / b as f64;
    let mut out = EmbeddingPretrainLoss {
        loss: 0.0,
        nll: 0.0,
        kl: 0.0,
        grad_q_or: vec![vec![0.0; dim]; b],
        grad_q_rw: vec![vec![0.0; dim]; b],
        grad_passages: vec![vec![0.0; dim]; passages.len()],
    };
    for i in 0..b {
        let cands = &candidates[i];
        let s: Vec<f64> = cands.iter().map(|&c| dot(&q_or[i], &passages[c])).collect();
        let r: Vec<f64> = cands.iter().map(|&c| dot(&q_rw[i], &passages[c])).collect();
        let p_or = softmax(&s);
        let p_rw = softmax(&r);

        let nll = nll_loss(
            &Distribution::from_scores(&s),
            &Distribution::from_scores(&r),
            0,
        );
        let kl = kl_regularizer(&Distribution::from_scores(&s), &Distribution::from_scores(&r));
        out.nll += scale * nll;
        out.kl += scale * kl;
        out.loss += scale * (nll + alpha * kl);

        let d: Vec<f64> = s.iter().zip(&r).map(|(a, b)| a - b).collect();
        let mean_p: f64 = p_or.iter().zip(&d).map(|(p, d)| p * d).sum();
        let mean_r: f64 = p_rw.iter().zip(&d).map(|(p, d)| p * d).sum();
        for (k, &c) in cands.iter().enumerate() {
            let target = if k == 0 { 1.0 } else { 0.0 };
            let diff = p_or[k] - p_rw[k];
            let gs = 0.5 * (p_or[k] - target) + alpha * 0.5 * (p_or[k] * (d[k] - mean_p) + diff);
            let gr = 0.5 * (p_rw[k] - target) + alpha * 0.5 * (-p_rw[k] * (d[k] - mean_r) - diff);
            axpy(&mut out.grad_q_or[i], scale * gs, &passages[c]);
            axpy(&mut out.grad_q_rw[i], scale * gr, &passages[c]);
            axpy(&mut out.grad_passages[c], scale * gs, &q_or[i]);
            axpy(&mut out.grad_passages[c], scale * gr, &q_rw[i]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutput {
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub question_grad: EncoderGrad,
    pub passage_grad: EncoderGrad,
}

/// Batch-mean pre-training loss with gradients for both encoders.
pub fn pretrain_loss(
    batch: &[PretrainInstance],
    alpha: f64,
    question_encoder: &EncoderParams,
    passage_encoder: &EncoderParams,
    passages: &PassageStore,
) -> Result<PretrainOutput> {
    if batch.is_empty() {
        return Err(Error::InvalidCorpus("empty pre-training batch".into()));
    }
    if let Some(bad) = batch.iter().find(|x| x.positive == x.hard_negative) {
        return Err(Error::InvalidCorpus(format!(
            "{}: hard negative equals the positive passage",
            bad.qid
        )));
    }
    let pid_sets = candidate_sets(batch);
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let mut unique: Vec<&str> = Vec::new();
    for pid in pid_sets.iter().flatten() {
        slot.entry(pid.as_str()).or_insert_with(|| {
            unique.push(pid.as_str());
            unique.len() - 1
        });
    }
    let mut p_embs = Vec::with_capacity(unique.len());
    let mut p_traces: Vec<EncodeTrace> = Vec::with_capacity(unique.len());
    for pid in &unique {
        let passage = passages
            .get(pid)
            .ok_or_else(|| Error::UnknownPassage((*pid).to_owned()))?;
        let (e, t) = encode(passage_encoder, &passage_sequence(passage));
        p_embs.push(e.0);
        p_traces.push(t);
    }
    let (q_or, or_traces): (Vec<_>, Vec<_>) = batch
        .iter()
        .map(|x| {
            let (e, t) = encode(question_encoder, &x.q_or);
            (e.0, t)
        })
        .unzip();
    let (q_rw, rw_traces): (Vec<_>, Vec<_>) = batch
        .iter()
        .map(|x| {
            let (e, t) = encode(question_encoder, &x.q_rw);
            (e.0, t)
        })
        .unzip();
    let candidates: Vec<Vec<usize>> = pid_sets
        .iter()
        .map(|set| set.iter().map(|pid| slot[pid.as_str()]).collect())
        .collect();

    let raw = pretrain_loss_on_embeddings(&q_or, &q_rw, &p_embs, &candidates, alpha);

    let mut question_grad = EncoderGrad::for_params(question_encoder);
    for i in 0..batch.len() {
        backprop(question_encoder, &or_traces[i], &raw.grad_q_or[i], &mut question_grad)?;
        backprop(question_encoder, &rw_traces[i], &raw.grad_q_rw[i], &mut question_grad)?;
    }
    let mut passage_grad = EncoderGrad::for_params(passage_encoder);
    for (trace, g) in p_traces.iter().zip(&raw.grad_passages) {
        backprop(passage_encoder, trace, g, &mut passage_grad)?;
    }
    Ok(PretrainOutput {
        loss: raw.loss,
        nll: raw.nll,
        kl: raw.kl,
        question_grad,
        passage_grad,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub alpha: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            batch_size: 16,
            lr: crate::config::DEFAULT_PRETRAIN_LR,
            steps: 200,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogEntry {
    pub step: usize,
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
}

/// Trains both encoders with the configured optimizer. Batches are drawn without
/// replacement from a seeded shuffle, reshuffling at every epoch.
pub fn pretrain(
    question_encoder: &mut EncoderParams,
    passage_encoder: &mut EncoderParams,
    instances: &[PretrainInstance],
    passages: &PassageStore,
    cfg: &PretrainConfig,
) -> Result<Vec<PretrainLogEntry>> {
    if instances.is_empty() {
        return Err(Error::InvalidCorpus("no pre-training instances".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let batch_size = cfg.batch_size.clamp(1, instances.len());
    let mut log = Vec::with_capacity(cfg.steps);
    let mut opt = Optimizer::new(cfg.optimizer);
    for step in 0..cfg.steps {
        if cursor + batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<PretrainInstance> = order[cursor..cursor + batch_size]
            .iter()
            .map(|&i| instances[i].clone())
            .collect();
        cursor += batch_size;
        let out = pretrain_loss(&batch, cfg.alpha, question_encoder, passage_encoder, passages)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: step as u64,
                dump: batch.iter().map(|b| b.qid.as_str()).collect::<Vec<_>>().join(","),
            });
        }
        opt.tick();
        opt.update_encoder("question", question_encoder, &out.question_grad, cfg.lr);
        opt.update_encoder("passage", passage_encoder, &out.passage_grad, cfg.lr);
        log.push(PretrainLogEntry {
            step,
            loss: out.loss,
            nll: out.nll,
            kl: out.kl,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_synthetic_corpus;

    fn inst(qid: &str, q: &str, rw: &str, pos: &str, neg: &str) -> PretrainInstance {
        PretrainInstance {
            qid: qid.into(),
            q_or: TokenSequence::from_words(q),
            q_rw: TokenSequence::from_words(rw),
            positive: pos.into(),
            hard_negative: neg.into(),
        }
    }

    #[test]
    fn candidate_sets_dedup_and_keep_positive_first() {
        let batch = vec![
            inst("a", "x", "x", "p1", "p2"),
            inst("b", "y", "y", "p2", "p1"),
            inst("c", "z", "z", "p3", "p1"),
        ];
        let sets = candidate_sets(&batch);
        assert_eq!(sets[0], ["p1", "p2", "p3"]);
        assert_eq!(sets[1], ["p2", "p1", "p3"]);
        assert_eq!(sets[2], ["p3", "p1", "p2"]);
    }

    #[test]
    fn alpha_zero_is_pure_nll() {
        let corpus = generate_synthetic_corpus(5, 3, 2, 20, 300).unwrap();
        let instances = build_pretrain_instances(&corpus, 6).unwrap();
        let q = EncoderParams::random(6, 64, 1);
        let p = EncoderParams::random(6, 64, 2);
        let out = pretrain_loss(&instances[..4], 0.0, &q, &p, corpus.passages()).unwrap();
        assert_eq!(out.loss, out.nll);
        assert!(out.kl > 0.0);
    }

    #[test]
    fn identical_question_forms_have_no_kl() {
        let corpus = generate_synthetic_corpus(5, 3, 2, 20, 300).unwrap();
        let mut instances = build_pretrain_instances(&corpus, 6).unwrap();
        for x in &mut instances {
            x.q_or = x.q_rw.clone();
        }
        let q = EncoderParams::random(6, 64, 1);
        let p = EncoderParams::random(6, 64, 2);
        let out = pretrain_loss(&instances[..4], 0.2, &q, &p, corpus.passages()).unwrap();
        assert_eq!(out.kl, 0.0);
        assert_eq!(out.loss, out.nll);
    }

    #[test]
    fn hard_negatives_overlap_and_differ_from_golden() {
        let corpus = generate_synthetic_corpus(2, 4, 3, 40, 400).unwrap();
        for x in build_pretrain_instances(&corpus, 6).unwrap() {
            assert_ne!(x.positive, x.hard_negative);
        }
    }

    #[test]
    fn miner_prefers_overlap_then_lower_pid() {
        use crate::corpus::Passage;
        let p = |pid: &str, text: &str| Passage {
            pid: pid.into(),
            title: String::new(),
            tokens: text.split(' ').map(String::from).collect(),
        };
        let store = PassageStore::new(vec![
            p("p3", "red fox jumps"),
            p("p1", "red fox"),
            p("p2", "red fox"),
            p("p0", "blue sky"),
        ])
        .unwrap();
        let miner = HardNegativeMiner::new(&store);
        let q: Vec<String> = ["the", "red", "fox", "jumps"].map(String::from).to_vec();
        assert_eq!(miner.mine(&q, "p3").as_deref(), Some("p1"));
        assert_eq!(miner.mine(&q, "p1").as_deref(), Some("p3"));
        let none: Vec<String> = vec!["zzz".into()];
        assert_eq!(miner.mine(&none, "p0").as_deref(), Some("p1"));
    }
}
