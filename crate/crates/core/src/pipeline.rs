//! End-to-end inference and split evaluation.
//!
//! A question is serialized without answers and retrieved against the index,
//! the top K are rescored by the post-ranker, and the reader reads the best T.
//! Every candidate span is scored `s_post + s_select + s_span`, with the three
//! scales combined raw.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{serialize_en, serialize_rd, Conversation, Corpus, PassageStore};
use crate::curriculum::JointModels;
use crate::encoder::{embed, EncoderParams};
use crate::error::{Error, Result};
use crate::math::score_cmp;
use crate::metrics::{mrr_at, recall_at, word_f1, MetricsReport, QuestionOutcome, Stopwords};
use crate::postranker::{rerank, PostRankerParams};
use crate::reader::{extract_spans, score_passage, ReaderParams, DEFAULT_MAX_SPAN_LEN, DEFAULT_TOP_SPANS};
use crate::retriever::{PassageIndex, ScoredPassage};

/// Everything inference needs. Immutable once built.
#[derive(Debug, Clone)]
pub struct PipelineBundle {
    pub question_encoder: EncoderParams,
    pub index: PassageIndex,
    pub postranker: PostRankerParams,
    pub reader: ReaderParams,
    pub passages: std::sync::Arc<PassageStore>,
    pub k: usize,
    pub t: usize,
    pub window: usize,
    pub max_span_len: usize,
    pub top_n: usize,
}

impl PipelineBundle {
    pub fn new(
        models: JointModels,
        index: PassageIndex,
        passages: std::sync::Arc<PassageStore>,
        k: usize,
        t: usize,
        window: usize,
    ) -> Result<Self> {
        if t == 0 {
            return Err(Error::config("T", "must be at least 1"));
        }
        if t > k {
            return Err(Error::config("T", format!("T = {t} exceeds K = {k}")));
        }
        for dim in [index.dim(), models.postranker.dim()] {
            if dim != models.question_encoder.dim() {
                return Err(Error::DimensionMismatch {
                    expected: models.question_encoder.dim(),
                    actual: dim,
                });
            }
        }
        Ok(Self {
            question_encoder: models.question_encoder,
            postranker: models.postranker,
            reader: models.reader,
            index,
            passages,
            k,
            t,
            window,
            max_span_len: DEFAULT_MAX_SPAN_LEN,
            top_n: DEFAULT_TOP_SPANS,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub s_post: f64,
    pub s_select: f64,
    pub s_span: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text_tokens: Vec<String>,
    pub pid: String,
    pub start: usize,
    pub end: usize,
    pub final_score: f64,
    pub breakdown: ScoreBreakdown,
}

impl Answer {
    pub fn text(&self) -> String {
        self.text_tokens.join(" ")
    }
}

/// Result of running the pipeline on one question.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// Post-ranked passages handed to the reader, best first.
    pub ranked: Vec<ScoredPassage>,
    /// `None` when no valid span exists.
    pub answer: Option<Answer>,
}

/// Anything that can answer a conversational question.
pub trait QaSystem: Sync {
    fn infer(&self, conv: &Conversation, turn: usize) -> Result<Inference>;
}

impl QaSystem for PipelineBundle {
    fn infer(&self, conv: &Conversation, turn: usize) -> Result<Inference> {
        if turn >= conv.turns.len() {
            return Err(Error::InvalidCorpus(format!("{} has no turn {turn}", conv.cid)));
        }
        let d_q = embed(&self.question_encoder, &serialize_en(conv, turn, self.window));
        let retrieved = self.index.retrieve_top_k(&d_q, self.k);
        let reranked = rerank(&self.postranker, &d_q, retrieved.pids(), &self.index)?;
        let ranked = reranked.top(self.t).to_vec();

        let q_rd = serialize_rd(conv, turn, self.window);
        let scored = ranked
            .par_iter()
            .map(|s| {
                let passage = self
                    .passages
                    .get(&s.pid)
                    .ok_or_else(|| Error::UnknownPassage(s.pid.clone()))?;
                score_passage(&self.reader, &q_rd, passage, s.score)
            })
            .collect::<Result<Vec<_>>>()?;
        let answer = extract_spans(&scored, self.max_span_len, self.top_n)
            .into_iter()
            .map(|s| Answer {
                final_score: s.s_post + s.s_select + s.s_span,
                breakdown: ScoreBreakdown {
                    s_post: s.s_post,
                    s_select: s.s_select,
                    s_span: s.s_span,
                },
                text_tokens: s.answer_tokens,
                pid: s.pid,
                start: s.start,
                end: s.end,
            })
            .reduce(|best, a| if beats(&a, &best) { a } else { best });
        Ok(Inference { ranked, answer })
    }
}

/// Higher score wins; equal scores go to the lower (pid, start).
fn beats(a: &Answer, b: &Answer) -> bool {
    score_cmp(a.final_score, b.final_score)
        .then_with(|| b.pid.cmp(&a.pid))
        .then(b.start.cmp(&a.start))
        .is_gt()
}

/// Answers one question; `Ok(None)` means unanswerable.
pub fn answer_question(bundle: &PipelineBundle, conv: &Conversation, turn: usize) -> Result<Option<Answer>> {
    Ok(bundle.infer(conv, turn)?.answer)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub t: usize,
    pub stopwords: Stopwords,
    pub human_f1: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            t: crate::config::DEFAULT_T,
            stopwords: Stopwords::default(),
            human_f1: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub outcomes: Vec<QuestionOutcome>,
}

/// Scores every turn of `corpus`. Ranking metrics use the first `opts.t`
/// passages the system returns.
pub fn evaluate_split(system: &impl QaSystem, corpus: &Corpus, opts: &EvalOptions) -> Result<Evaluation> {
    let refs = corpus.turn_refs();
    if refs.is_empty() {
        return Err(Error::InvalidCorpus("evaluation split has no questions".into()));
    }
    let outcomes = refs
        .par_iter()
        .map(|&(c, t)| {
            let conv = &corpus.conversations()[c];
            let turn = &conv.turns[t];
            let inference = system.infer(conv, t)?;
            let ranked: Vec<&str> = inference.ranked.iter().map(|s| s.pid.as_str()).collect();
            let golden = BTreeSet::from([turn.golden_pid.clone()]);
            let pred = inference.answer.map(|a| a.text_tokens).unwrap_or_default();
            Ok(QuestionOutcome {
                qid: turn.qid.clone(),
                dialog: conv.cid.clone(),
                f1: word_f1(&pred, &turn.answer_text_tokens, &opts.stopwords),
                human_f1: opts.human_f1,
                mrr: mrr_at(&ranked, &golden, opts.t),
                recall: recall_at(&ranked, &golden, opts.t),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        report: MetricsReport::from_outcomes(&outcomes),
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn answer(pid: &str, start: usize, score: f64) -> Answer {
        Answer {
            text_tokens: vec![],
            pid: pid.into(),
            start,
            end: start,
            final_score: score,
            breakdown: ScoreBreakdown {
                s_post: score,
                s_select: 0.0,
                s_span: 0.0,
            },
        }
    }

    #[test]
    fn ties_go_to_lower_pid_then_start() {
        assert!(beats(&answer("a", 5, 1.0), &answer("b", 0, 1.0)));
        assert!(!beats(&answer("b", 0, 1.0), &answer("a", 5, 1.0)));
        assert!(beats(&answer("a", 1, 1.0), &answer("a", 2, 1.0)));
        assert!(beats(&answer("z", 9, 2.0), &answer("a", 0, 1.0)));
    }
}
