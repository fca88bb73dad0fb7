//! JSONL ingestion and export.
//!
//! `passages.jsonl` holds one `{"pid", "title", "text"}` object per line and a
//! conversations file holds one
//! `{"cid", "turns": [{"qid", "question", "rewrite", "answer": {"text", "pid", "start", "end"}}]}`
//! object per line. Answer offsets are inclusive token positions under
//! [`tokenize`](super::tokenize). Unknown fields are ignored; missing fields are
//! errors.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{tokenize, Conversation, Corpus, Passage, PassageStore, Split, Turn};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct PassageRecord {
    pid: String,
    title: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct AnswerRecord {
    text: String,
    pid: String,
    start: usize,
    end: usize,
}

#[derive(Serialize, Deserialize)]
struct TurnRecord {
    qid: String,
    question: String,
    rewrite: String,
    answer: AnswerRecord,
}

#[derive(Serialize, Deserialize)]
struct ConversationRecord {
    cid: String,
    turns: Vec<TurnRecord>,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for record in records {
        serde_json::to_writer(&mut w, &record).expect("records serialize");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_passages(path: impl AsRef<Path>) -> Result<PassageStore> {
    let records: Vec<PassageRecord> = read_jsonl(path.as_ref())?;
    PassageStore::new(
        records
            .into_iter()
            .map(|r| Passage {
                pid: r.pid,
                title: r.title,
                tokens: tokenize(&r.text),
            })
            .collect(),
    )
}

fn load_conversations(path: &Path) -> Result<Vec<Conversation>> {
    let records: Vec<ConversationRecord> = read_jsonl(path)?;
    Ok(records
        .into_iter()
        .map(|c| Conversation {
            cid: c.cid,
            turns: c
                .turns
                .into_iter()
                .map(|t| Turn {
                    qid: t.qid,
                    question_tokens: tokenize(&t.question),
                    rewrite_tokens: tokenize(&t.rewrite),
                    answer_text_tokens: tokenize(&t.answer.text),
                    golden_pid: t.answer.pid,
                    answer_start: t.answer.start,
                    answer_end: t.answer.end,
                })
                .collect(),
        })
        .collect())
}

/// Loads a training corpus from a passages file and a conversations file.
pub fn load_corpus(
    passages_path: impl AsRef<Path>,
    conversations_path: impl AsRef<Path>,
) -> Result<Corpus> {
    load_split(passages_path, conversations_path, Split::Train)
}

pub fn load_split(
    passages_path: impl AsRef<Path>,
    conversations_path: impl AsRef<Path>,
    split: Split,
) -> Result<Corpus> {
    let passages = Arc::new(load_passages(passages_path)?);
    let conversations = load_conversations(conversations_path.as_ref())?;
    Corpus::new(passages, conversations, split)
}

pub fn write_passages(path: impl AsRef<Path>, passages: &PassageStore) -> Result<()> {
    write_jsonl(
        path.as_ref(),
        passages.iter().map(|p| PassageRecord {
            pid: p.pid.clone(),
            title: p.title.clone(),
            text: p.tokens.join(" "),
        }),
    )
}

pub fn write_conversations(path: impl AsRef<Path>, conversations: &[Conversation]) -> Result<()> {
    write_jsonl(
        path.as_ref(),
        conversations.iter().map(|c| ConversationRecord {
            cid: c.cid.clone(),
            turns: c
                .turns
                .iter()
                .map(|t| TurnRecord {
                    qid: t.qid.clone(),
                    question: t.question_tokens.join(" "),
                    rewrite: t.rewrite_tokens.join(" "),
                    answer: AnswerRecord {
                        text: t.answer_text_tokens.join(" "),
                        pid: t.golden_pid.clone(),
                        start: t.answer_start,
                        end: t.answer_end,
                    },
                })
                .collect(),
        }),
    )
}
