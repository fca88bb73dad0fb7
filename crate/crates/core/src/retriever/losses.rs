use log::warn;

use crate::error::{Error, Result};
use crate::math::{dot, safe_ln, softmax, LOG_FLOOR};

/// Probabilities over a candidate list.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    /// Wraps probabilities after checking they are non-negative and sum to one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidCorpus(format!(
                "not a probability distribution (sum {total})"
            )));
        }
        Ok(Self(probs))
    }

    /// Softmax of raw scores.
    pub fn from_scores(scores: &[f64]) -> Self {
        assert!(!scores.is_empty(), "distribution over no candidates");
        Self(softmax(scores))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Softmax over the inner products of `q` with each candidate.
pub fn candidate_distribution<'a>(
    q: &[f64],
    candidates: impl IntoIterator<Item = &'a [f64]>,
) -> Distribution {
    let scores: Vec<f64> = candidates.into_iter().map(|p| dot(q, p)).collect();
    Distribution::from_scores(&scores)
}

/// `-(ln d_or[pos] + ln d_rw[pos]) / 2`, with logarithm arguments floored.
pub fn nll_loss(d_or: &Distribution, d_rw: &Distribution, pos: usize) -> f64 {
    let (a, b) = (d_or.0[pos], d_rw.0[pos]);
    if a < LOG_FLOOR || b < LOG_FLOOR {
        warn!("positive probability underflow ({a:e}, {b:e}); clamping");
    }
    -0.5 * (safe_ln(a) + safe_ln(b))
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - safe_ln(*qi)))
        .sum()
}

/// Symmetrised KL divergence `(KL(or‖rw) + KL(rw‖or)) / 2`.
pub fn kl_regularizer(d_or: &Distribution, d_rw: &Distribution) -> f64 {
    assert_eq!(d_or.len(), d_rw.len(), "distributions over different candidates");
    // Clamp tiny negative round-off; the exact value is non-negative.
    (0.5 * (kl(&d_or.0, &d_rw.0) + kl(&d_rw.0, &d_or.0))).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrieverLoss {
    pub loss: f64,
    /// Gradient with respect to the question embedding. Passage embeddings are
    /// frozen and receive nothing.
    pub grad_question: Vec<f64>,
}

/// `-ln softmax(q · p_j)[pos]` over the retrieved candidates.
pub fn retriever_finetune_loss(
    question: &[f64],
    candidates: &[&[f64]],
    pos: usize,
) -> Result<RetrieverLoss> {
    if pos >= candidates.len() {
        return Err(Error::PositiveAbsent(format!("candidate #{pos}")));
    }
    let scores: Vec<f64> = candidates.iter().map(|p| dot(question, p)).collect();
    let probs = softmax(&scores);
    let mut grad_question = vec![0.0; question.len()];
    for (k, (p, prob)) in candidates.iter().zip(&probs).enumerate() {
        let g = prob - if k == pos { 1.0 } else { 0.0 };
        crate::math::axpy(&mut grad_question, g, p);
    }
    let lse = crate::math::log_sum_exp(&scores);
    Ok(RetrieverLoss {
        loss: lse - scores[pos],
        grad_question,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn distribution_examples() {
        let q = [1.0, 0.0];
        let even = candidate_distribution(&q, [&[0.5, 1.0][..], &[0.5, -3.0][..]]);
        assert_eq!(even.probs(), &[0.5, 0.5]);

        let skew = Distribution::from_scores(&[1.0, 0.0, 0.0]);
        let expected = [0.5761, 0.2119, 0.2119];
        for (a, b) in skew.probs().iter().zip(expected) {
            assert!((a - b).abs() < 1e-4);
        }
        let shifted = Distribution::from_scores(&[8.0, 7.0, 7.0]);
        for (a, b) in skew.probs().iter().zip(shifted.probs()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn nll_examples() {
        assert_eq!(nll_loss(&d(&[1.0, 0.0]), &d(&[1.0, 0.0]), 0), 0.0);
        let v = nll_loss(&d(&[0.5761, 0.4239]), &d(&[0.2119, 0.7881]), 0);
        assert!((v - 1.0516).abs() < 1e-3, "{v}");
        let q = [0.25; 4];
        assert!((nll_loss(&d(&q), &d(&q), 2) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_clamps_zero_probability() {
        let v = nll_loss(&d(&[0.0, 1.0]), &d(&[0.0, 1.0]), 0);
        assert!((v + LOG_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_regularizer(&d(&[0.3, 0.7]), &d(&[0.3, 0.7])), 0.0);
        let v = kl_regularizer(&d(&[0.75, 0.25]), &d(&[0.5, 0.5]));
        assert!((v - 0.13733).abs() < 1e-4, "{v}");
        assert_eq!(
            kl_regularizer(&d(&[0.75, 0.25]), &d(&[0.5, 0.5])),
            kl_regularizer(&d(&[0.5, 0.5]), &d(&[0.75, 0.25]))
        );
    }

    #[test]
    fn kl_with_zero_entries_is_finite() {
        let v = kl_regularizer(&d(&[1.0, 0.0]), &d(&[0.5, 0.5]));
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn finetune_loss_examples() {
        let only = retriever_finetune_loss(&[0.3, 0.2], &[&[1.0, 1.0]], 0).unwrap();
        assert!(only.loss.abs() < 1e-15);
        let p = [0.5, 0.5];
        let cands: Vec<&[f64]> = vec![&p; 5];
        let uniform = retriever_finetune_loss(&[1.0, -1.0], &cands, 3).unwrap();
        assert!((uniform.loss - 5f64.ln()).abs() < 1e-12);
        assert!(matches!(
            retriever_finetune_loss(&[1.0, -1.0], &cands, 5),
            Err(Error::PositiveAbsent(_))
        ));
    }
}
