//! Passages, conversations and the question serialization schemes.
//!
//! A [`Corpus`] pairs a shared [`PassageStore`] with the conversations of one
//! split. Splits generated from the same source share the passage store, so
//! cloning a corpus or splitting it never copies passage text.

mod io;
mod serialize;
mod synthetic;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use self::io::{load_corpus, load_passages, load_split, write_conversations, write_passages};
pub use self::serialize::{
    passage_sequence, rewrite_sequence, serialize_en, serialize_or, serialize_rd, TokenSequence,
    CLS, MAX_PASSAGE_LEN, MAX_QUESTION_LEN, MAX_READER_LEN, SEP,
};
pub use self::synthetic::{generate_synthetic_corpus, SyntheticCorpusConfig};

/// Lowercase, split on whitespace and strip every non-alphanumeric character.
/// Tokens that end up empty are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let tok: String = raw
                .chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect();
            (!tok.is_empty()).then_some(tok)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passage {
    pub pid: String,
    pub title: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub qid: String,
    pub question_tokens: Vec<String>,
    pub rewrite_tokens: Vec<String>,
    pub answer_text_tokens: Vec<String>,
    pub golden_pid: String,
    /// Inclusive token offset into the golden passage.
    pub answer_start: usize,
    /// Inclusive token offset into the golden passage.
    pub answer_end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub cid: String,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

/// Passages with a pid lookup table. Insertion order is preserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassageStore {
    passages: Vec<Passage>,
    by_pid: HashMap<String, usize>,
}

impl PassageStore {
    pub fn new(passages: Vec<Passage>) -> Result<Self> {
        let mut by_pid = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if p.tokens.is_empty() {
                return Err(Error::InvalidCorpus(format!("passage {} has no tokens", p.pid)));
            }
            if by_pid.insert(p.pid.clone(), i).is_some() {
                return Err(Error::InvalidCorpus(format!("duplicate passage id {}", p.pid)));
            }
        }
        Ok(Self { passages, by_pid })
    }

    pub fn get(&self, pid: &str) -> Option<&Passage> {
        self.by_pid.get(pid).map(|&i| &self.passages[i])
    }

    pub fn position(&self, pid: &str) -> Option<usize> {
        self.by_pid.get(pid).copied()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Passage> {
        self.passages.iter()
    }

    pub fn as_slice(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }
}

/// A validated set of conversations over a passage collection.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    passages: Arc<PassageStore>,
    conversations: Vec<Conversation>,
    split: Split,
}

impl Corpus {
    /// Builds a corpus, checking every conversation against the passages.
    pub fn new(
        passages: Arc<PassageStore>,
        conversations: Vec<Conversation>,
        split: Split,
    ) -> Result<Self> {
        for conv in &conversations {
            validate_conversation(&passages, conv)?;
        }
        Ok(Self {
            passages,
            conversations,
            split,
        })
    }

    pub fn passages(&self) -> &PassageStore {
        &self.passages
    }

    pub fn shared_passages(&self) -> Arc<PassageStore> {
        Arc::clone(&self.passages)
    }

    pub fn conversations(&self) -> &[Conversation] {
        &self.conversations
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn passage(&self, pid: &str) -> Option<&Passage> {
        self.passages.get(pid)
    }

    pub fn n_turns(&self) -> usize {
        self.conversations.iter().map(|c| c.turns.len()).sum()
    }

    /// All `(conversation index, turn index)` pairs in corpus order.
    pub fn turn_refs(&self) -> Vec<(usize, usize)> {
        self.conversations
            .iter()
            .enumerate()
            .flat_map(|(ci, c)| (0..c.turns.len()).map(move |ti| (ci, ti)))
            .collect()
    }

    /// Partitions the conversations into train/dev/test corpora sharing this
    /// passage store. Conversations keep their order; dev and test take the
    /// tail of the list.
    pub fn partition(&self, dev: usize, test: usize) -> Result<(Corpus, Corpus, Corpus)> {
        let n = self.conversations.len();
        if dev + test >= n {
            return Err(Error::InvalidCorpus(format!(
                "cannot hold out {dev}+{test} of {n} conversations"
            )));
        }
        let train_end = n - dev - test;
        let make = |range: std::ops::Range<usize>, split| Corpus {
            passages: Arc::clone(&self.passages),
            conversations: self.conversations[range].to_vec(),
            split,
        };
        Ok((
            make(0..train_end, Split::Train),
            make(train_end..train_end + dev, Split::Dev),
            make(train_end + dev..n, Split::Test),
        ))
    }
}

fn validate_conversation(passages: &PassageStore, conv: &Conversation) -> Result<()> {
    if conv.turns.is_empty() {
        return Err(Error::InvalidCorpus(format!("conversation {} has no turns", conv.cid)));
    }
    let mut seen = HashSet::new();
    for turn in &conv.turns {
        if !seen.insert(turn.qid.as_str()) {
            return Err(Error::InvalidCorpus(format!(
                "conversation {} repeats qid {}",
                conv.cid, turn.qid
            )));
        }
        validate_turn(passages, turn)?;
    }
    Ok(())
}

fn validate_turn(passages: &PassageStore, turn: &Turn) -> Result<()> {
    let passage = passages
        .get(&turn.golden_pid)
        .ok_or_else(|| Error::DanglingPassage {
            qid: turn.qid.clone(),
            pid: turn.golden_pid.clone(),
        })?;
    let invalid = |message: String| Error::InvalidAnswer {
        qid: turn.qid.clone(),
        message,
    };
    if turn.answer_start > turn.answer_end || turn.answer_end >= passage.tokens.len() {
        return Err(invalid(format!(
            "answer offsets {}..={} out of range for passage {} with {} tokens",
            turn.answer_start,
            turn.answer_end,
            passage.pid,
            passage.tokens.len()
        )));
    }
    let slice = &passage.tokens[turn.answer_start..=turn.answer_end];
    if slice != turn.answer_text_tokens.as_slice() {
        return Err(invalid(format!(
            "answer text {:?} does not match passage tokens {:?}",
            turn.answer_text_tokens.join(" "),
            slice.join(" ")
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_lowercases_and_strips_punctuation() {
        assert_eq!(
            tokenize("Hello, World!  It's   (fine) -- ok"),
            vec!["hello", "world", "its", "fine", "ok"]
        );
        assert!(tokenize(" ... ").is_empty());
    }

    #[test]
    fn duplicate_pids_are_rejected() {
        let p = Passage {
            pid: "a".into(),
            title: "t".into(),
            tokens: vec!["x".into()],
        };
        assert!(PassageStore::new(vec![p.clone(), p]).is_err());
    }
}
