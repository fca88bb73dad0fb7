//! Question and passage serialization.
//!
//! Three question layouts are used, all built from a history window of `w`
//! turns before the current one:
//!
//! | scheme | answers | forced first question |
//! |--------|---------|-----------------------|
//! | [`serialize_or`] | yes | yes |
//! | [`serialize_en`] | no  | yes |
//! | [`serialize_rd`] | no  | no  |
//!
//! The forced first question is only emitted when it falls outside the window,
//! so it never appears twice. Over-long sequences lose the oldest windowed
//! history first, then the forced first question; the current question is cut
//! only when it alone exceeds the budget.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Conversation, Passage};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

/// Token budget of a serialized question.
pub const MAX_QUESTION_LEN: usize = 128;
/// Token budget of a serialized passage.
pub const MAX_PASSAGE_LEN: usize = 384;
/// Token budget of a reader input (question plus passage).
pub const MAX_READER_LEN: usize = 512;

/// Markers and words fed to an encoder. Always starts with `[CLS]` and ends
/// with `[SEP]` when produced by this module.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<String>);

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn from_words(words: &str) -> Self {
        Self(words.split_whitespace().map(str::to_owned).collect())
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Scheme {
    Original,
    Encoder,
    Reader,
}

/// Question with windowed history and answers, always led by the first turn.
///
/// `turn` is a zero-based index into `conv.turns`.
pub fn serialize_or(conv: &Conversation, turn: usize, window: usize) -> TokenSequence {
    serialize(conv, turn, window, Scheme::Original)
}

/// Like [`serialize_or`] without answers.
pub fn serialize_en(conv: &Conversation, turn: usize, window: usize) -> TokenSequence {
    serialize(conv, turn, window, Scheme::Encoder)
}

/// Like [`serialize_en`] without the forced first question.
pub fn serialize_rd(conv: &Conversation, turn: usize, window: usize) -> TokenSequence {
    serialize(conv, turn, window, Scheme::Reader)
}

/// `[CLS] rewrite [SEP]`
pub fn rewrite_sequence(conv: &Conversation, turn: usize) -> TokenSequence {
    let mut tokens = Vec::with_capacity(conv.turns[turn].rewrite_tokens.len() + 2);
    tokens.push(CLS.to_owned());
    tokens.extend(conv.turns[turn].rewrite_tokens.iter().cloned());
    tokens.truncate(MAX_QUESTION_LEN - 1);
    tokens.push(SEP.to_owned());
    TokenSequence(tokens)
}

/// `[CLS] title [SEP] text [SEP]`, text tail cut to fit the passage budget.
pub fn passage_sequence(passage: &Passage) -> TokenSequence {
    let title: Vec<String> = super::tokenize(&passage.title);
    let mut tokens = Vec::with_capacity(title.len() + passage.tokens.len() + 3);
    tokens.push(CLS.to_owned());
    tokens.extend(title);
    tokens.push(SEP.to_owned());
    let room = MAX_PASSAGE_LEN.saturating_sub(tokens.len() + 1);
    tokens.extend(passage.tokens.iter().take(room).cloned());
    tokens.truncate(MAX_PASSAGE_LEN - 1);
    tokens.push(SEP.to_owned());
    TokenSequence(tokens)
}

fn serialize(conv: &Conversation, turn: usize, window: usize, scheme: Scheme) -> TokenSequence {
    assert!(turn < conv.turns.len(), "turn {turn} out of range");
    let with_answers = scheme == Scheme::Original;
    let segment = |i: usize| -> Vec<&str> {
        let t = &conv.turns[i];
        let mut seg: Vec<&str> = t.question_tokens.iter().map(String::as_str).collect();
        seg.push(SEP);
        if with_answers {
            seg.extend(t.answer_text_tokens.iter().map(String::as_str));
            seg.push(SEP);
        }
        seg
    };

    let first_in_window = turn.saturating_sub(window);
    let forced = (scheme != Scheme::Reader && first_in_window > 0).then(|| segment(0));
    let mut history: Vec<Vec<&str>> = (first_in_window..turn).map(segment).collect();
    let mut forced = forced;

    let mut current: Vec<&str> = conv.turns[turn].question_tokens.iter().map(String::as_str).collect();
    current.truncate(MAX_QUESTION_LEN - 2);

    let len = |forced: &Option<Vec<&str>>, history: &[Vec<&str>]| {
        1 + forced.as_ref().map_or(0, Vec::len)
            + history.iter().map(Vec::len).sum::<usize>()
            + current.len()
            + 1
    };
    while len(&forced, &history) > MAX_QUESTION_LEN {
        if !history.is_empty() {
            history.remove(0);
        } else if forced.is_some() {
            forced = None;
        } else {
            break;
        }
    }

    let mut tokens = vec![CLS.to_owned()];
    for seg in forced.iter().chain(history.iter()) {
        tokens.extend(seg.iter().map(|s| (*s).to_owned()));
    }
    tokens.extend(current.iter().map(|s| (*s).to_owned()));
    tokens.push(SEP.to_owned());
    TokenSequence(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Turn;

    fn conv(n: usize) -> Conversation {
        Conversation {
            cid: "c".into(),
            turns: (1..=n)
                .map(|i| Turn {
                    qid: format!("q{i}"),
                    question_tokens: vec![format!("q{i}")],
                    rewrite_tokens: vec![format!("r{i}")],
                    answer_text_tokens: vec![format!("a{i}")],
                    golden_pid: "p".into(),
                    answer_start: 0,
                    answer_end: 0,
                })
                .collect(),
        }
    }

    fn s(seq: TokenSequence) -> String {
        seq.to_string()
    }

    #[test]
    fn original_scheme() {
        let c = conv(4);
        assert_eq!(s(serialize_or(&c, 0, 6)), "[CLS] q1 [SEP]");
        assert_eq!(
            s(serialize_or(&c, 2, 1)),
            "[CLS] q1 [SEP] a1 [SEP] q2 [SEP] a2 [SEP] q3 [SEP]"
        );
        assert_eq!(s(serialize_or(&c, 1, 6)), "[CLS] q1 [SEP] a1 [SEP] q2 [SEP]");
    }

    #[test]
    fn encoder_scheme() {
        let c = conv(4);
        assert_eq!(s(serialize_en(&c, 0, 3)), "[CLS] q1 [SEP]");
        assert_eq!(s(serialize_en(&c, 2, 1)), "[CLS] q1 [SEP] q2 [SEP] q3 [SEP]");
        assert_eq!(s(serialize_en(&c, 1, 0)), "[CLS] q1 [SEP] q2 [SEP]");
    }

    #[test]
    fn reader_scheme() {
        let c = conv(4);
        assert_eq!(s(serialize_rd(&c, 0, 2)), "[CLS] q1 [SEP]");
        assert_eq!(s(serialize_rd(&c, 2, 1)), "[CLS] q2 [SEP] q3 [SEP]");
        assert_eq!(
            s(serialize_rd(&c, 3, 6)),
            "[CLS] q1 [SEP] q2 [SEP] q3 [SEP] q4 [SEP]"
        );
    }

    #[test]
    fn long_history_drops_oldest_window_turns_first() {
        let mut c = conv(4);
        for t in &mut c.turns {
            t.question_tokens = vec!["w".into(); 40];
        }
        c.turns[3].question_tokens = vec!["cur".into(); 30];
        // forced q1 (41) + window q2,q3 (41 each) + current (30) + 2 markers = 155
        let seq = serialize_en(&c, 3, 2);
        assert!(seq.len() <= MAX_QUESTION_LEN);
        // q2 dropped, q1 and q3 kept
        assert_eq!(seq.len(), 1 + 41 + 41 + 30 + 1);
        assert_eq!(seq.tokens().iter().filter(|t| *t == "cur").count(), 30);
    }

    #[test]
    fn passage_sequence_layout() {
        let p = Passage {
            pid: "p".into(),
            title: "Some Title".into(),
            tokens: vec!["a".into(), "b".into()],
        };
        assert_eq!(s(passage_sequence(&p)), "[CLS] some title [SEP] a b [SEP]");
        let long = Passage {
            tokens: vec!["x".into(); 1000],
            ..p
        };
        assert_eq!(passage_sequence(&long).len(), MAX_PASSAGE_LEN);
    }
}
