//! Answer and ranking metrics: word-level F1, HEQ-Q/HEQ-D, MRR and Recall.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stopwords removed before word-level F1.
pub const DEFAULT_STOPWORDS: [&str; 25] = [
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "has", "he", "in", "is", "it",
    "its", "of", "on", "that", "the", "to", "was", "were", "will", "with",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stopwords(HashSet<String>);

impl Default for Stopwords {
    fn default() -> Self {
        Self(DEFAULT_STOPWORDS.iter().map(|w| (*w).to_owned()).collect())
    }
}

impl Stopwords {
    pub fn none() -> Self {
        Self(HashSet::new())
    }

    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self(words.into_iter().map(|w| w.into().to_lowercase()).collect())
    }

    /// One word per line; blank lines and `#` comments are ignored.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_words(
            text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')),
        ))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }
}

/// Harmonic mean of multiset-overlap precision and recall, ignoring stopwords.
pub fn word_f1<S: AsRef<str>>(pred: &[S], gold: &[S], stopwords: &Stopwords) -> f64 {
    fn bag<'a, S: AsRef<str>>(tokens: &'a [S], stopwords: &Stopwords) -> (HashMap<&'a str, usize>, usize) {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut total = 0;
        for t in tokens.iter().map(AsRef::as_ref).filter(|t| !stopwords.contains(t)) {
            *counts.entry(t).or_default() += 1;
            total += 1;
        }
        (counts, total)
    }
    let (p, p_total) = bag(pred, stopwords);
    let (g, g_total) = bag(gold, stopwords);
    match (p_total, g_total) {
        (0, 0) => return 1.0,
        (0, _) | (_, 0) => return 0.0,
        _ => {}
    }
    let common: usize = p.iter().map(|(w, c)| (*c).min(g.get(w).copied().unwrap_or(0))).sum();
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p_total as f64;
    let recall = common as f64 / g_total as f64;
    2.0 * precision * recall / (precision + recall)
}

/// `(HEQ-Q, HEQ-D)` as percentages. `dialogs[i]` names the dialog of question
/// `i`.
pub fn heq<S: AsRef<str>>(f1s: &[f64], human_f1s: &[f64], dialogs: &[S]) -> (f64, f64) {
    assert_eq!(f1s.len(), human_f1s.len(), "human F1 alignment");
    assert_eq!(f1s.len(), dialogs.len(), "dialog alignment");
    if f1s.is_empty() {
        return (0.0, 0.0);
    }
    let mut per_dialog: HashMap<&str, bool> = HashMap::new();
    let mut hits = 0;
    for ((f, h), d) in f1s.iter().zip(human_f1s).zip(dialogs) {
        let ok = f >= h;
        hits += ok as usize;
        *per_dialog.entry(d.as_ref()).or_insert(true) &= ok;
    }
    let dialogs_ok = per_dialog.values().filter(|ok| **ok).count();
    (
        100.0 * hits as f64 / f1s.len() as f64,
        100.0 * dialogs_ok as f64 / per_dialog.len() as f64,
    )
}

/// Reciprocal rank of the first golden pid within the top `t`, else 0.
pub fn mrr_at<S: AsRef<str>>(ranked: &[S], golden: &BTreeSet<String>, t: usize) -> f64 {
    assert!(t >= 1, "T must be at least 1");
    ranked
        .iter()
        .take(t)
        .position(|p| golden.contains(p.as_ref()))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

/// Fraction of golden pids found within the top `t`.
pub fn recall_at<S: AsRef<str>>(ranked: &[S], golden: &BTreeSet<String>, t: usize) -> f64 {
    if golden.is_empty() {
        return 0.0;
    }
    let found: BTreeSet<&str> = ranked
        .iter()
        .take(t)
        .map(AsRef::as_ref)
        .filter(|p| golden.contains(*p))
        .collect();
    found.len() as f64 / golden.len() as f64
}

/// Per-question inputs to a [`MetricsReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub qid: String,
    pub dialog: String,
    pub f1: f64,
    pub human_f1: f64,
    pub mrr: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1: f64,
    pub heq_q: f64,
    pub heq_d: f64,
    pub mrr: f64,
    pub recall: f64,
    pub n_questions: usize,
    pub n_dialogs: usize,
}

pub const REPORT_CSV_HEADER: &str = "F1,HEQ-Q,HEQ-D,Rt MRR,Rt Recall,n_questions,n_dialogs";

impl MetricsReport {
    pub fn from_outcomes(outcomes: &[QuestionOutcome]) -> Self {
        let n = outcomes.len();
        let mean = |f: fn(&QuestionOutcome) -> f64| {
            if n == 0 {
                0.0
            } else {
                outcomes.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let f1s: Vec<f64> = outcomes.iter().map(|o| o.f1).collect();
        let human: Vec<f64> = outcomes.iter().map(|o| o.human_f1).collect();
        let dialogs: Vec<&str> = outcomes.iter().map(|o| o.dialog.as_str()).collect();
        let (heq_q, heq_d) = heq(&f1s, &human, &dialogs);
        Self {
            f1: mean(|o| o.f1),
            heq_q,
            heq_d,
            mrr: mean(|o| o.mrr),
            recall: mean(|o| o.recall),
            n_questions: n,
            n_dialogs: dialogs.iter().collect::<BTreeSet<_>>().len(),
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.4},{:.4},{:.6},{:.6},{},{}",
            self.f1, self.heq_q, self.heq_d, self.mrr, self.recall, self.n_questions, self.n_dialogs
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{REPORT_CSV_HEADER}\n{}\n", self.csv_row())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pids: &[&str]) -> BTreeSet<String> {
        pids.iter().map(|p| (*p).to_owned()).collect()
    }

    #[test]
    fn stopwords_are_loaded_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stop.txt");
        std::fs::write(&path, "# list\nFoo\n\nbar\n").unwrap();
        let sw = Stopwords::load(&path).unwrap();
        assert!(sw.contains("foo") && sw.contains("bar") && !sw.contains("the"));
        assert_eq!(word_f1(&["foo", "x"], &["x"], &sw), 1.0);
    }

    #[test]
    fn f1_counts_repeated_words_once_each() {
        let none = Stopwords::none();
        // pred {x,x,y}, gold {x,y,y}: overlap 2, P=R=2/3
        let f = word_f1(&["x", "x", "y"], &["x", "y", "y"], &none);
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(word_f1::<&str>(&[], &[], &none), 1.0);
        assert_eq!(word_f1(&["x"], &[], &none), 0.0);
    }

    #[test]
    fn empty_metrics_are_zero() {
        let r = MetricsReport::from_outcomes(&[]);
        assert_eq!((r.f1, r.heq_q, r.n_questions), (0.0, 0.0, 0));
        assert_eq!(recall_at(&["a"], &set(&[]), 1), 0.0);
    }

    #[test]
    fn report_aggregates_and_csv() {
        let o = |q: &str, d: &str, f1: f64| QuestionOutcome {
            qid: q.into(),
            dialog: d.into(),
            f1,
            human_f1: 1.0,
            mrr: f1,
            recall: 1.0,
        };
        let r = MetricsReport::from_outcomes(&[o("1", "a", 1.0), o("2", "a", 0.5), o("3", "b", 1.0)]);
        assert!((r.f1 - 2.5 / 3.0).abs() < 1e-12);
        assert!((r.heq_q - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(r.heq_d, 50.0);
        assert_eq!((r.n_questions, r.n_dialogs), (3, 2));
        let csv = r.to_csv();
        assert!(csv.starts_with("F1,HEQ-Q,HEQ-D,Rt MRR,Rt Recall"));
        assert_eq!(csv.lines().count(), 2);
    }
}
