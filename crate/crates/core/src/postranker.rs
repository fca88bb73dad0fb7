//! Linear post-ranker over frozen passage embeddings.
//!
//! Each retrieved passage embedding is mapped through `d = W·p + b` and scored
//! against the (unprojected) question embedding with an inner product. The
//! layer is trained with a max-margin hinge over scores plus a triplet margin
//! loss over Euclidean distances:
//!
//! ```text
//! hinge   = max(0, δ - S(q, p⁺) + max_j S(q, p⁻_j))
//! triplet = max(0, μ + D(q, d⁺) - D(q, d⁻*))      d⁻* = negative closest to q
//! loss    = hinge + β · triplet
//! ```
//!
//! At ties inside `max`/`min` the first candidate wins; a margin term that is
//! exactly zero contributes no gradient.

use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingVector;
use crate::error::{Error, Result};
use crate::math::{argmax, argmin, axpy, dot, euclidean, score_cmp};
use crate::retriever::{PassageIndex, ScoredPassage};

pub const DEFAULT_DELTA: f64 = 0.5;
pub const DEFAULT_MU: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct PostRankerParams {
    dim: usize,
    /// Row-major `dim × dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl PostRankerParams {
    /// Identity weight and zero bias: scores equal the retriever's.
    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self {
            dim,
            weight,
            bias: vec![0.0; dim],
        }
    }

    pub fn from_parts(dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != dim * dim || bias.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim + dim,
                actual: weight.len() + bias.len(),
            });
        }
        Ok(Self { dim, weight, bias })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `W·p + b`
    pub fn project(&self, p: &[f64]) -> EmbeddingVector {
        assert_eq!(p.len(), self.dim, "passage embedding dimension");
        EmbeddingVector(
            self.weight
                .chunks_exact(self.dim)
                .zip(&self.bias)
                .map(|(row, b)| dot(row, p) + b)
                .collect(),
        )
    }

    pub fn apply(&mut self, grad: &PostRankerGrad, lr: f64) {
        axpy(&mut self.weight, -lr, &grad.weight);
        axpy(&mut self.bias, -lr, &grad.bias);
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Post-ranker score of a projected passage.
pub fn score_post(d_q: &[f64], d_p: &[f64]) -> f64 {
    assert_eq!(d_q.len(), d_p.len(), "score dimensions");
    dot(d_q, d_p)
}

/// Candidates rescored by the post-ranker, descending; ties by ascending pid.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RerankedList {
    pub ranked: Vec<ScoredPassage>,
}

impl RerankedList {
    pub fn top(&self, t: usize) -> &[ScoredPassage] {
        &self.ranked[..t.min(self.ranked.len())]
    }

    pub fn pids(&self) -> impl Iterator<Item = &str> {
        self.ranked.iter().map(|s| s.pid.as_str())
    }
}

/// Rescores every candidate with `score_post(d_q, project(p))` and re-sorts.
pub fn rerank<'a>(
    params: &PostRankerParams,
    d_q: &[f64],
    candidates: impl IntoIterator<Item = &'a str>,
    index: &PassageIndex,
) -> Result<RerankedList> {
    let mut ranked = candidates
        .into_iter()
        .map(|pid| {
            let p = index
                .embedding(pid)
                .ok_or_else(|| Error::UnknownPassage(pid.to_owned()))?;
            Ok(ScoredPassage {
                pid: pid.to_owned(),
                score: score_post(d_q, &params.project(p)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| score_cmp(b.score, a.score).then_with(|| a.pid.cmp(&b.pid)));
    Ok(RerankedList { ranked })
}

/// `max(0, δ - s_pos + max_j s_negs[j])`
pub fn hinge_loss(s_pos: f64, s_negs: &[f64], delta: f64) -> f64 {
    assert!(!s_negs.is_empty(), "hinge loss needs a negative");
    (delta - s_pos + s_negs[argmax(s_negs)]).max(0.0)
}

/// `max(0, μ + D(q, pos) - D(q, neg*))` with `neg*` the negative nearest `q`.
pub fn triplet_loss(d_q: &[f64], d_pos: &[f64], d_negs: &[&[f64]], mu: f64) -> f64 {
    assert!(!d_negs.is_empty(), "triplet loss needs a negative");
    let dists: Vec<f64> = d_negs.iter().map(|n| euclidean(d_q, n)).collect();
    (mu + euclidean(d_q, d_pos) - dists[argmin(&dists)]).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostRankerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl PostRankerGrad {
    pub fn new(dim: usize) -> Self {
        Self {
            weight: vec![0.0; dim * dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn add_assign(&mut self, other: &PostRankerGrad) {
        axpy(&mut self.weight, 1.0, &other.weight);
        axpy(&mut self.bias, 1.0, &other.bias);
    }

    pub fn scale(&mut self, factor: f64) {
        self.weight.iter_mut().chain(&mut self.bias).for_each(|v| *v *= factor);
    }

    pub fn is_zero(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| *v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostRankerLoss {
    pub loss: f64,
    pub hinge: f64,
    pub triplet: f64,
    pub grad_question: Vec<f64>,
    pub grad: PostRankerGrad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostRankerMargins {
    pub delta: f64,
    pub mu: f64,
    pub beta: f64,
}

impl Default for PostRankerMargins {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            mu: DEFAULT_MU,
            beta: DEFAULT_BETA,
        }
    }
}

/// `hinge + β·triplet` for one question. `candidates` are raw passage
/// embeddings and `pos` the position of the positive among them.
pub fn postranker_loss(
    params: &PostRankerParams,
    d_q: &[f64],
    candidates: &[&[f64]],
    pos: usize,
    margins: PostRankerMargins,
) -> Result<PostRankerLoss> {
    if pos >= candidates.len() {
        return Err(Error::PositiveAbsent(format!("candidate #{pos}")));
    }
    let dim = params.dim;
    let mut out = PostRankerLoss {
        loss: 0.0,
        hinge: 0.0,
        triplet: 0.0,
        grad_question: vec![0.0; dim],
        grad: PostRankerGrad::new(dim),
    };
    if candidates.len() < 2 {
        return Ok(out);
    }
    let projected: Vec<Vec<f64>> = candidates.iter().map(|p| params.project(p).0).collect();
    let negatives: Vec<usize> = (0..candidates.len()).filter(|&j| j != pos).collect();
    // Upstream gradients on each projected passage.
    let mut grad_proj = vec![vec![0.0; dim]; candidates.len()];

    let scores: Vec<f64> = negatives.iter().map(|&j| dot(d_q, &projected[j])).collect();
    let hardest = negatives[argmax(&scores)];
    let margin = margins.delta - dot(d_q, &projected[pos]) + dot(d_q, &projected[hardest]);
    if margin > 0.0 {
        out.hinge = margin;
        axpy(&mut out.grad_question, -1.0, &projected[pos]);
        axpy(&mut out.grad_question, 1.0, &projected[hardest]);
        axpy(&mut grad_proj[pos], -1.0, d_q);
        axpy(&mut grad_proj[hardest], 1.0, d_q);
    }

    let dists: Vec<f64> = negatives.iter().map(|&j| euclidean(d_q, &projected[j])).collect();
    let nearest = negatives[argmin(&dists)];
    let d_pos = euclidean(d_q, &projected[pos]);
    let d_neg = euclidean(d_q, &projected[nearest]);
    let t = margins.mu + d_pos - d_neg;
    if t > 0.0 {
        out.triplet = t;
        let beta = margins.beta;
        for (j, dist, sign) in [(pos, d_pos, 1.0), (nearest, d_neg, -1.0)] {
            if dist > 0.0 {
                let unit: Vec<f64> = d_q.iter().zip(&projected[j]).map(|(a, b)| (a - b) / dist).collect();
                axpy(&mut out.grad_question, beta * sign, &unit);
                axpy(&mut grad_proj[j], -beta * sign, &unit);
            }
        }
    }
    out.loss = out.hinge + margins.beta * out.triplet;

    for (g, p) in grad_proj.iter().zip(candidates) {
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        for (row, gi) in out.grad.weight.chunks_exact_mut(dim).zip(g) {
            axpy(row, *gi, p);
        }
        axpy(&mut out.grad.bias, 1.0, g);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Checksum;

    #[test]
    fn projection_examples() {
        let id = PostRankerParams::identity(3);
        assert_eq!(id.project(&[1.0, -2.0, 0.5]).0, vec![1.0, -2.0, 0.5]);
        let b = PostRankerParams::from_parts(2, vec![0.0; 4], vec![0.3, -0.7]).unwrap();
        assert_eq!(b.project(&[5.0, 6.0]).0, vec![0.3, -0.7]);
        // [[1,2,0],[0,1,-1],[3,0,1]]·(1,2,3) + (0.5,0,-1) = (5.5, -1, 5)
        let m = PostRankerParams::from_parts(
            3,
            vec![1.0, 2.0, 0.0, 0.0, 1.0, -1.0, 3.0, 0.0, 1.0],
            vec![0.5, 0.0, -1.0],
        )
        .unwrap();
        assert_eq!(m.project(&[1.0, 2.0, 3.0]).0, vec![5.5, -1.0, 5.0]);
    }

    #[test]
    fn score_examples() {
        assert_eq!(score_post(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(score_post(&[1.0, 2.0], &[3.0, 4.0]), 11.0);
        assert_eq!(score_post(&[3.0, 4.0], &[1.0, 2.0]), 11.0);
    }

    fn toy_index() -> PassageIndex {
        PassageIndex::from_rows(
            vec!["a".into(), "b".into(), "c".into()],
            2,
            vec![3.0, 0.0, 2.0, 0.0, 1.0, 0.0],
            Checksum::default(),
        )
        .unwrap()
    }

    #[test]
    fn identity_rerank_keeps_retriever_order() {
        let idx = toy_index();
        let q = [1.0, 0.0];
        let retrieved = idx.retrieve_top_k(&q, 3);
        let re = rerank(&PostRankerParams::identity(2), &q, retrieved.pids(), &idx).unwrap();
        assert_eq!(re.ranked, retrieved.ranked);
    }

    #[test]
    fn negated_weight_reverses_order() {
        let idx = toy_index();
        let q = [1.0, 0.0];
        let retrieved = idx.retrieve_top_k(&q, 3);
        let flip = PostRankerParams::from_parts(2, vec![-1.0, 0.0, 0.0, 1.0], vec![0.0; 2]).unwrap();
        let re = rerank(&flip, &q, retrieved.pids(), &idx).unwrap();
        assert_eq!(re.pids().collect::<Vec<_>>(), ["c", "b", "a"]);
        assert_eq!(re.top(3).len(), 3);
    }

    #[test]
    fn rerank_unknown_pid() {
        let idx = toy_index();
        let err = rerank(&PostRankerParams::identity(2), &[1.0, 0.0], ["zz"], &idx).unwrap_err();
        assert!(matches!(err, Error::UnknownPassage(p) if p == "zz"));
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge_loss(2.0, &[1.0], 0.5), 0.0);
        assert!((hinge_loss(1.0, &[0.3, 1.2], 0.5) - 0.7).abs() < 1e-12);
        assert_eq!(hinge_loss(1.0, &[1.0], 0.0), 0.0);
    }

    #[test]
    fn triplet_examples() {
        let q = [0.0, 0.0];
        assert_eq!(triplet_loss(&q, &[0.2, 0.0], &[&[1.5, 0.0]], 1.0), 0.0);
        assert!((triplet_loss(&q, &[0.0, 0.8], &[&[1.0, 0.0], &[0.0, 3.0]], 1.0) - 0.8).abs() < 1e-12);
        assert_eq!(triplet_loss(&q, &[0.6, 0.8], &[&[0.6, 0.8]], 1.0), 1.0);
    }

    #[test]
    fn beta_zero_is_hinge_only() {
        let params = PostRankerParams::identity(2);
        let q = [1.0, 0.5];
        let cands: Vec<&[f64]> = vec![&[0.2, 0.1], &[0.9, 0.3], &[0.1, -0.4]];
        let margins = PostRankerMargins { delta: 0.5, mu: 1.0, beta: 0.0 };
        let out = postranker_loss(&params, &q, &cands, 0, margins).unwrap();
        let hinge = hinge_loss(
            score_post(&q, &[0.2, 0.1]),
            &[score_post(&q, &[0.9, 0.3]), score_post(&q, &[0.1, -0.4])],
            0.5,
        );
        assert_eq!(out.loss, hinge);
    }

    #[test]
    fn satisfied_margins_give_zero_gradient() {
        let params = PostRankerParams::identity(2);
        let q = [1.0, 0.0];
        let cands: Vec<&[f64]> = vec![&[1.0, 0.0], &[-5.0, 0.0]];
        let out = postranker_loss(&params, &q, &cands, 0, PostRankerMargins::default()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.is_zero());
        assert!(out.grad_question.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn missing_positive_is_an_error() {
        let params = PostRankerParams::identity(2);
        let cands: Vec<&[f64]> = vec![&[1.0, 0.0]];
        assert!(postranker_loss(&params, &[1.0, 0.0], &cands, 3, PostRankerMargins::default()).is_err());
    }
}
