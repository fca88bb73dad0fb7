//! Extractive span reader.
//!
//! Token representations use a three-token context window inside their own
//! segment (question or passage):
//!
//! ```text
//! z_t   = tanh(W · (e_t + mean(e_{t-1}, e_t, e_{t+1})))
//! z_cls = mean of every z over question and passage tokens
//! ```
//!
//! with hashed embeddings `e`. Start, end and passage-selection scores are
//! inner products with the trainable vectors `w_start`, `w_end` and
//! `w_select`. Spans only ever cover passage tokens.

use std::cmp::Ordering;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Passage, TokenSequence, MAX_PASSAGE_LEN, MAX_READER_LEN};
use crate::encoder::{EncoderGrad, EncoderParams};
use crate::error::{Error, Result};
use crate::math::{axpy, dot, log_sum_exp, score_cmp, softmax};

pub const DEFAULT_MAX_SPAN_LEN: usize = 10;
pub const DEFAULT_TOP_SPANS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct ReaderParams {
    pub encoder: EncoderParams,
    pub w_start: Vec<f64>,
    pub w_end: Vec<f64>,
    pub w_select: Vec<f64>,
}

impl ReaderParams {
    pub fn random(dim: usize, hash_buckets: usize, seed: u64) -> Self {
        let encoder = EncoderParams::random(dim, hash_buckets, seed);
        let bound = 1.0 / (dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5ea0);
        let mut vec = || (0..dim).map(|_| rng.gen_range(-bound..bound)).collect::<Vec<f64>>();
        Self {
            w_start: vec(),
            w_end: vec(),
            w_select: vec(),
            encoder,
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn apply(&mut self, grad: &ReaderGrad, lr: f64) {
        self.encoder.apply(&grad.encoder, lr);
        axpy(&mut self.w_start, -lr, &grad.w_start);
        axpy(&mut self.w_end, -lr, &grad.w_end);
        axpy(&mut self.w_select, -lr, &grad.w_select);
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite()
            && self.w_start.iter().chain(&self.w_end).chain(&self.w_select).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReaderGrad {
    pub encoder: EncoderGrad,
    pub w_start: Vec<f64>,
    pub w_end: Vec<f64>,
    pub w_select: Vec<f64>,
}

impl ReaderGrad {
    pub fn new(dim: usize) -> Self {
        Self {
            encoder: EncoderGrad::new(dim),
            w_start: vec![0.0; dim],
            w_end: vec![0.0; dim],
            w_select: vec![0.0; dim],
        }
    }

    pub fn add_assign(&mut self, other: &ReaderGrad) {
        self.encoder.add_assign(&other.encoder);
        axpy(&mut self.w_start, 1.0, &other.w_start);
        axpy(&mut self.w_end, 1.0, &other.w_end);
        axpy(&mut self.w_select, 1.0, &other.w_select);
    }

    pub fn scale(&mut self, factor: f64) {
        self.encoder.scale(factor);
        for v in self.w_start.iter_mut().chain(&mut self.w_end).chain(&mut self.w_select) {
            *v *= factor;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Segment {
    buckets: Vec<u32>,
    contexts: Vec<Vec<f64>>,
    reps: Vec<Vec<f64>>,
}

fn encode_segment(params: &EncoderParams, tokens: &[String]) -> Segment {
    let buckets: Vec<u32> = tokens.iter().map(|t| params.bucket(t)).collect();
    let n = buckets.len();
    let mut contexts = Vec::with_capacity(n);
    let mut reps = Vec::with_capacity(n);
    for t in 0..n {
        let lo = t.saturating_sub(1);
        let hi = (t + 1).min(n - 1);
        let share = 1.0 / (hi - lo + 1) as f64;
        let mut c = params.row(buckets[t]).to_vec();
        for &b in &buckets[lo..=hi] {
            axpy(&mut c, share, params.row(b));
        }
        reps.push(params.project(&c).into_iter().map(f64::tanh).collect());
        contexts.push(c);
    }
    Segment {
        buckets,
        contexts,
        reps,
    }
}

fn backprop_segment(
    params: &EncoderParams,
    seg: &Segment,
    grad_reps: &[Vec<f64>],
    accum: &mut EncoderGrad,
) {
    let n = seg.buckets.len();
    let dim = params.dim();
    for t in 0..n {
        let g = &grad_reps[t];
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        let gh: Vec<f64> = g.iter().zip(&seg.reps[t]).map(|(g, z)| g * (1.0 - z * z)).collect();
        for (row, ghi) in accum.projection.chunks_exact_mut(dim).zip(&gh) {
            axpy(row, *ghi, &seg.contexts[t]);
        }
        let gc = params.project_transpose(&gh);
        let lo = t.saturating_sub(1);
        let hi = (t + 1).min(n - 1);
        let share = 1.0 / (hi - lo + 1) as f64;
        axpy(accum.row_mut(seg.buckets[t]), 1.0, &gc);
        for &b in &seg.buckets[lo..=hi] {
            axpy(accum.row_mut(b), share, &gc);
        }
    }
}

/// Token representations for one (question, passage) reader input.
#[derive(Debug, Clone, PartialEq)]
pub struct ReaderEncoding {
    question: Segment,
    passage: Segment,
    /// Passage tokens that survived truncation.
    pub tokens: Vec<String>,
    pub z_cls: Vec<f64>,
}

impl ReaderEncoding {
    /// `z_t` for every kept passage token.
    pub fn passage_reps(&self) -> &[Vec<f64>] {
        &self.passage.reps
    }

    pub fn question_reps(&self) -> &[Vec<f64>] {
        &self.question.reps
    }
}

/// Number of passage tokens that fit beside a question of `question_len`
/// tokens and a closing `[SEP]`.
pub fn passage_budget(question_len: usize) -> usize {
    MAX_PASSAGE_LEN.min(MAX_READER_LEN.saturating_sub(question_len + 1))
}

pub fn encode_reader_input(
    params: &ReaderParams,
    q_rd: &TokenSequence,
    passage: &Passage,
) -> Result<ReaderEncoding> {
    if passage.tokens.is_empty() {
        return Err(Error::InvalidCorpus(format!("passage {} is empty", passage.pid)));
    }
    let keep = passage.tokens.len().min(passage_budget(q_rd.len()));
    let tokens = passage.tokens[..keep].to_vec();
    let question = encode_segment(&params.encoder, q_rd.tokens());
    let passage = encode_segment(&params.encoder, &tokens);
    let total = question.reps.len() + passage.reps.len();
    let mut z_cls = vec![0.0; params.dim()];
    for z in question.reps.iter().chain(&passage.reps) {
        axpy(&mut z_cls, 1.0 / total as f64, z);
    }
    Ok(ReaderEncoding {
        question,
        passage,
        tokens,
        z_cls,
    })
}

/// `(z_t · w_start, z_t · w_end)` for every token.
pub fn score_tokens(reps: &[Vec<f64>], w_start: &[f64], w_end: &[f64]) -> (Vec<f64>, Vec<f64>) {
    reps.iter().map(|z| (dot(z, w_start), dot(z, w_end))).unzip()
}

pub fn score_select(z_cls: &[f64], w_select: &[f64]) -> f64 {
    dot(z_cls, w_select)
}

/// Everything span extraction needs about one passage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageScores {
    pub pid: String,
    pub tokens: Vec<String>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub select: f64,
    pub post: f64,
}

/// Runs the reader over one passage.
pub fn score_passage(
    params: &ReaderParams,
    q_rd: &TokenSequence,
    passage: &Passage,
    post: f64,
) -> Result<PassageScores> {
    let enc = encode_reader_input(params, q_rd, passage)?;
    let (start, end) = score_tokens(enc.passage_reps(), &params.w_start, &params.w_end);
    Ok(PassageScores {
        pid: passage.pid.clone(),
        select: score_select(&enc.z_cls, &params.w_select),
        tokens: enc.tokens,
        start,
        end,
        post,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub pid: String,
    /// Inclusive passage token offsets.
    pub start: usize,
    pub end: usize,
    pub s_span: f64,
    pub s_select: f64,
    pub s_post: f64,
    pub answer_tokens: Vec<String>,
}

/// Best `top_n` spans across all passages by `s_start + s_end`.
///
/// Spans with start after end or longer than `max_span_len` tokens are never
/// produced. Ties are ordered by pid, then start, then end.
pub fn extract_spans(
    passages: &[PassageScores],
    max_span_len: usize,
    top_n: usize,
) -> Vec<SpanPrediction> {
    struct Cand {
        passage: usize,
        start: usize,
        end: usize,
        score: f64,
    }
    let mut cands = Vec::new();
    for (pi, p) in passages.iter().enumerate() {
        let n = p.start.len().min(p.end.len()).min(p.tokens.len());
        for s in 0..n {
            for e in s..n.min(s + max_span_len) {
                cands.push(Cand {
                    passage: pi,
                    start: s,
                    end: e,
                    score: p.start[s] + p.end[e],
                });
            }
        }
    }
    let order = |a: &Cand, b: &Cand| -> Ordering {
        score_cmp(b.score, a.score)
            .then_with(|| passages[a.passage].pid.cmp(&passages[b.passage].pid))
            .then(a.start.cmp(&b.start))
            .then(a.end.cmp(&b.end))
    };
    if top_n < cands.len() && top_n > 0 {
        cands.select_nth_unstable_by(top_n - 1, order);
    }
    cands.truncate(top_n);
    cands.sort_unstable_by(order);
    cands
        .into_iter()
        .map(|c| {
            let p = &passages[c.passage];
            SpanPrediction {
                pid: p.pid.clone(),
                start: c.start,
                end: c.end,
                s_span: c.score,
                s_select: p.select,
                s_post: p.post,
                answer_tokens: p.tokens[c.start..=c.end].to_vec(),
            }
        })
        .collect()
}

/// Reader losses from raw scores, with gradients on those scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ReaderScoreLoss {
    pub loss: f64,
    pub start: f64,
    pub end: f64,
    pub select: f64,
    pub grad_start: Vec<Vec<f64>>,
    pub grad_end: Vec<Vec<f64>>,
    pub grad_select: Vec<f64>,
}

/// `(L_start + L_end)/2 + L_select`. Start and end softmaxes run over every
/// token of every passage; the selection softmax runs over passages.
pub fn reader_loss_from_scores(
    start_scores: &[Vec<f64>],
    end_scores: &[Vec<f64>],
    select_scores: &[f64],
    golden: usize,
    answer_start: usize,
    answer_end: usize,
) -> ReaderScoreLoss {
    let flat_nll = |scores: &[Vec<f64>], target: usize| -> (f64, Vec<Vec<f64>>) {
        let flat: Vec<f64> = scores.iter().flatten().copied().collect();
        let offset: usize = scores[..golden].iter().map(Vec::len).sum::<usize>() + target;
        let lse = log_sum_exp(&flat);
        let probs = softmax(&flat);
        let mut k = 0;
        let grads = scores
            .iter()
            .map(|row| {
                row.iter()
                    .map(|_| {
                        let g = probs[k] - if k == offset { 1.0 } else { 0.0 };
                        k += 1;
                        g
                    })
                    .collect()
            })
            .collect();
        (lse - flat[offset], grads)
    };
    let (start, mut grad_start) = flat_nll(start_scores, answer_start);
    let (end, mut grad_end) = flat_nll(end_scores, answer_end);
    for g in grad_start.iter_mut().chain(&mut grad_end).flatten() {
        *g *= 0.5;
    }
    let select = log_sum_exp(select_scores) - select_scores[golden];
    let grad_select = softmax(select_scores)
        .into_iter()
        .enumerate()
        .map(|(j, p)| p - if j == golden { 1.0 } else { 0.0 })
        .collect();
    ReaderScoreLoss {
        loss: 0.5 * (start + end) + select,
        start,
        end,
        select,
        grad_start,
        grad_end,
        grad_select,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReaderLoss {
    pub loss: f64,
    pub start: f64,
    pub end: f64,
    pub select: f64,
    pub grad: ReaderGrad,
}

/// Reader loss for one question over a passage set containing the golden
/// passage at `golden`. Returns `Ok(None)` when truncation cut the golden
/// answer out of the reader input.
pub fn reader_loss(
    params: &ReaderParams,
    q_rd: &TokenSequence,
    passages: &[&Passage],
    golden: usize,
    answer_start: usize,
    answer_end: usize,
) -> Result<Option<ReaderLoss>> {
    if golden >= passages.len() {
        return Err(Error::PositiveAbsent(format!("passage #{golden}")));
    }
    let encodings = passages
        .iter()
        .map(|p| encode_reader_input(params, q_rd, p))
        .collect::<Result<Vec<_>>>()?;
    if answer_end >= encodings[golden].tokens.len() || answer_start > answer_end {
        return Ok(None);
    }
    let (starts, ends): (Vec<_>, Vec<_>) = encodings
        .iter()
        .map(|e| score_tokens(e.passage_reps(), &params.w_start, &params.w_end))
        .unzip();
    let selects: Vec<f64> = encodings.iter().map(|e| score_select(&e.z_cls, &params.w_select)).collect();
    let raw = reader_loss_from_scores(&starts, &ends, &selects, golden, answer_start, answer_end);

    let dim = params.dim();
    let mut grad = ReaderGrad::new(dim);
    for (j, enc) in encodings.iter().enumerate() {
        let gsel = raw.grad_select[j];
        axpy(&mut grad.w_select, gsel, &enc.z_cls);
        let total = enc.question.reps.len() + enc.passage.reps.len();
        let mut cls_share = vec![0.0; dim];
        axpy(&mut cls_share, gsel / total as f64, &params.w_select);

        let q_grads: Vec<Vec<f64>> = vec![cls_share.clone(); enc.question.reps.len()];
        let p_grads: Vec<Vec<f64>> = enc
            .passage
            .reps
            .iter()
            .enumerate()
            .map(|(t, z)| {
                let (gs, ge) = (raw.grad_start[j][t], raw.grad_end[j][t]);
                axpy(&mut grad.w_start, gs, z);
                axpy(&mut grad.w_end, ge, z);
                let mut g = cls_share.clone();
                axpy(&mut g, gs, &params.w_start);
                axpy(&mut g, ge, &params.w_end);
                g
            })
            .collect();
        backprop_segment(&params.encoder, &enc.question, &q_grads, &mut grad.encoder);
        backprop_segment(&params.encoder, &enc.passage, &p_grads, &mut grad.encoder);
    }
    Ok(Some(ReaderLoss {
        loss: raw.loss,
        start: raw.start,
        end: raw.end,
        select: raw.select,
        grad,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn passage(pid: &str, text: &str) -> Passage {
        Passage {
            pid: pid.into(),
            title: String::new(),
            tokens: text.split_whitespace().map(String::from).collect(),
        }
    }

    fn scores(pid: &str, start: &[f64], end: &[f64]) -> PassageScores {
        PassageScores {
            pid: pid.into(),
            tokens: (0..start.len()).map(|i| format!("t{i}")).collect(),
            start: start.to_vec(),
            end: end.to_vec(),
            select: 0.0,
            post: 0.0,
        }
    }

    #[test]
    fn single_token_passage_uses_itself_as_window() {
        let params = ReaderParams::random(4, 32, 1);
        let enc = encode_reader_input(&params, &TokenSequence::from_words("[CLS] q [SEP]"), &passage("p", "x")).unwrap();
        let e = params.encoder.row(params.encoder.bucket("x"));
        let c: Vec<f64> = e.iter().map(|v| 2.0 * v).collect();
        let expected: Vec<f64> = params.encoder.project(&c).into_iter().map(f64::tanh).collect();
        assert_eq!(enc.passage_reps()[0], expected);
    }

    #[test]
    fn z_cls_is_mean_of_all_reps() {
        let params = ReaderParams::random(4, 32, 2);
        let q = TokenSequence::from_words("[CLS] who is it [SEP]");
        let enc = encode_reader_input(&params, &q, &passage("p", "a b c d")).unwrap();
        let all: Vec<&Vec<f64>> = enc.question_reps().iter().chain(enc.passage_reps()).collect();
        for k in 0..4 {
            let mean = all.iter().map(|z| z[k]).sum::<f64>() / all.len() as f64;
            assert!((mean - enc.z_cls[k]).abs() < 1e-12);
        }
        let again = encode_reader_input(&params, &q, &passage("p", "a b c d")).unwrap();
        assert_eq!(enc, again);
    }

    #[test]
    fn empty_passage_is_rejected() {
        let params = ReaderParams::random(4, 32, 2);
        let p = Passage { pid: "p".into(), title: String::new(), tokens: vec![] };
        assert!(encode_reader_input(&params, &TokenSequence::from_words("[CLS]"), &p).is_err());
    }

    #[test]
    fn long_passages_are_truncated_to_budget() {
        let params = ReaderParams::random(2, 8, 2);
        let q = TokenSequence(vec!["q".into(); 200]);
        let long = Passage { pid: "p".into(), title: String::new(), tokens: vec!["x".into(); 600] };
        let enc = encode_reader_input(&params, &q, &long).unwrap();
        assert_eq!(enc.tokens.len(), 512 - 201);
        assert!(q.len() + enc.tokens.len() < MAX_READER_LEN);
    }

    #[test]
    fn token_and_select_scores() {
        let reps = vec![vec![1.0, 2.0], vec![0.0, -1.0], vec![3.0, 0.5]];
        let (s, e) = score_tokens(&reps, &[0.0, 0.0], &[1.0, 1.0]);
        assert_eq!(s, vec![0.0, 0.0, 0.0]);
        assert_eq!(e, vec![3.0, -1.0, 3.5]);
        let (s, _) = score_tokens(&[vec![1.0, 0.0]], &[0.0, 5.0], &[0.0, 0.0]);
        assert_eq!(s, vec![0.0]);
        let (s, _) = score_tokens(&reps, &[0.5, -1.0], &[0.0, 0.0]);
        assert_eq!(s, vec![-1.5, 1.0, 1.0]);
        assert_eq!(score_select(&[1.0, 2.0], &[0.0, 0.0]), 0.0);
        assert_eq!(score_select(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(score_select(&[1.0, 2.0], &[3.0, -0.5]), 2.0);
    }

    #[test]
    fn best_span_over_three_tokens() {
        let p = scores("p", &[3.0, 0.0, 0.0], &[0.0, 0.0, 3.0]);
        let spans = extract_spans(&[p], 10, 20);
        assert_eq!(spans.len(), 6);
        assert_eq!((spans[0].start, spans[0].end, spans[0].s_span), (0, 2, 6.0));
        let top = extract_spans(&[scores("p", &[3.0, 0.0, 0.0], &[0.0, 0.0, 3.0])], 10, 1);
        assert_eq!(top.len(), 1);
        assert_eq!((top[0].start, top[0].end), (0, 2));
    }

    #[test]
    fn reversed_peak_is_never_returned() {
        let p = scores("p", &[0.0, -9.0, 5.0], &[-9.0, 5.0, -9.0]);
        let spans = extract_spans(&[p], 10, 20);
        assert!(spans.iter().all(|s| s.start <= s.end));
        assert!(!spans.iter().any(|s| s.start == 2 && s.end == 1));
        assert_eq!((spans[0].start, spans[0].end), (0, 1));
    }

    #[test]
    fn max_span_len_limits_width() {
        let p = scores("p", &[1.0; 6], &[1.0; 6]);
        let spans = extract_spans(&[p], 2, 100);
        assert!(spans.iter().all(|s| s.end - s.start < 2));
        assert_eq!(spans.len(), 6 + 5);
    }

    #[test]
    fn singleton_passage_set_has_zero_select_loss() {
        let out = reader_loss_from_scores(&[vec![0.1, 0.4]], &[vec![0.0, 0.2]], &[1.7], 0, 0, 1);
        assert!(out.select.abs() < 1e-15);
    }

    #[test]
    fn uniform_scores_give_log_n() {
        let starts = vec![vec![0.3; 4], vec![0.3; 3]];
        let out = reader_loss_from_scores(&starts, &starts, &[0.0, 0.0], 1, 2, 2);
        assert!((out.start - 7f64.ln()).abs() < 1e-12);
        assert!((out.end - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn truncated_golden_answer_is_skipped() {
        let params = ReaderParams::random(2, 8, 2);
        let long = Passage { pid: "p".into(), title: String::new(), tokens: vec!["x".into(); 600] };
        let q = TokenSequence::from_words("[CLS] q [SEP]");
        assert!(reader_loss(&params, &q, &[&long], 0, 500, 501).unwrap().is_none());
        assert!(reader_loss(&params, &q, &[&long], 0, 5, 6).unwrap().is_some());
        assert!(reader_loss(&params, &q, &[&long], 1, 5, 6).is_err());
    }
}
