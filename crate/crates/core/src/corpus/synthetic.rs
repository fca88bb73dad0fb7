//! Seeded synthetic conversational corpus.
//!
//! Every conversation is about one entity and asks about a different attribute
//! in each turn. An entity is discussed by up to four conversations, never
//! twice about the same attribute. The first question names the entity; later questions refer to
//! it with a pronoun and the rewrite substitutes the entity back. Each turn has
//! a golden passage stating `<entity> <attribute> is <value...>` inside filler
//! text, and the remaining passages are distractor facts, some about the same
//! entities or attributes.

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Conversation, Corpus, Passage, PassageStore, Split, Turn};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticCorpusConfig {
    pub seed: u64,
    pub n_conversations: usize,
    pub turns_per_conv: usize,
    pub n_passages: usize,
    pub vocab_size: usize,
}

impl SyntheticCorpusConfig {
    pub fn generate(&self) -> Result<Corpus> {
        generate_synthetic_corpus(
            self.seed,
            self.n_conversations,
            self.turns_per_conv,
            self.n_passages,
            self.vocab_size,
        )
    }
}

/// Upper bound on how many conversations discuss the same entity.
const CONVERSATIONS_PER_ENTITY: usize = 4;

const CONSONANTS: &[u8] = b"bdfghjklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Three consonant-vowel syllables; distinct for every index below 80^3.
fn pseudo_word(mut index: usize) -> String {
    let mut word = String::with_capacity(6);
    for _ in 0..3 {
        let syllable = index % (CONSONANTS.len() * VOWELS.len());
        index /= CONSONANTS.len() * VOWELS.len();
        word.push(CONSONANTS[syllable / VOWELS.len()] as char);
        word.push(VOWELS[syllable % VOWELS.len()] as char);
    }
    word
}

struct Vocabulary {
    entities: Vec<String>,
    attributes: Vec<String>,
    values: Vec<String>,
    filler: Vec<String>,
}

impl Vocabulary {
    fn attribute_count(size: usize, turns: usize) -> usize {
        (size / 20).clamp(turns, 64.max(turns))
    }

    fn new(rng: &mut ChaCha8Rng, size: usize, n_entities: usize, turns: usize) -> Result<Self> {
        let n_attributes = Self::attribute_count(size, turns);
        let n_values = (size / 10).max(2);
        let n_filler = (size / 80).max(1);
        let fixed = n_attributes + n_values + n_filler;
        if size < fixed + n_entities || size > 80usize.pow(3) {
            return Err(Error::InvalidCorpus(format!(
                "vocab_size {size} is too small for {n_entities} distinct entities \
                 ({n_attributes} attributes, {n_values} values and {n_filler} filler words reserved)"
            )));
        }
        let mut words: Vec<String> = (0..size).map(pseudo_word).collect();
        words.shuffle(rng);
        let filler = words.split_off(size - n_filler);
        let values = words.split_off(words.len() - n_values);
        let attributes = words.split_off(words.len() - n_attributes);
        Ok(Self {
            entities: words,
            attributes,
            values,
            filler,
        })
    }
}

struct Fact {
    entity: usize,
    attribute: usize,
    values: Vec<String>,
}

fn fact_passage(rng: &mut ChaCha8Rng, vocab: &Vocabulary, fact: &Fact) -> (Vec<String>, usize) {
    let before = rng.gen_range(1..=5);
    let after = rng.gen_range(1..=5);
    let mut tokens: Vec<String> = (0..before)
        .map(|_| vocab.filler.choose(rng).unwrap().clone())
        .collect();
    tokens.push(vocab.entities[fact.entity].clone());
    tokens.push(vocab.attributes[fact.attribute].clone());
    tokens.push("is".to_owned());
    let start = tokens.len();
    tokens.extend(fact.values.iter().cloned());
    tokens.extend((0..after).map(|_| vocab.filler.choose(rng).unwrap().clone()));
    (tokens, start)
}

fn sample_values(rng: &mut ChaCha8Rng, vocab: &Vocabulary) -> Vec<String> {
    let n = rng.gen_range(1..=3);
    (0..n).map(|_| vocab.values.choose(rng).unwrap().clone()).collect()
}

fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// Generates a corpus deterministically from `seed`.
///
/// Requires `n_passages >= n_conversations * turns_per_conv` so every turn can
/// own a golden passage.
pub fn generate_synthetic_corpus(
    seed: u64,
    n_conversations: usize,
    turns_per_conv: usize,
    n_passages: usize,
    vocab_size: usize,
) -> Result<Corpus> {
    for (name, v) in [
        ("n_conversations", n_conversations),
        ("turns_per_conv", turns_per_conv),
        ("n_passages", n_passages),
        ("vocab_size", vocab_size),
    ] {
        if v == 0 {
            return Err(Error::InvalidCorpus(format!("{name} must be at least 1")));
        }
    }
    let n_golden = n_conversations * turns_per_conv;
    if n_passages < n_golden {
        return Err(Error::InvalidCorpus(format!(
            "n_passages {n_passages} is below the {n_golden} golden passages required"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_entity =
        (Vocabulary::attribute_count(vocab_size, turns_per_conv) / turns_per_conv).clamp(1, CONVERSATIONS_PER_ENTITY);
    let n_entities = n_conversations.div_ceil(per_entity);
    let vocab = Vocabulary::new(&mut rng, vocab_size, n_entities, turns_per_conv)?;

    // Entities recur across conversations so that held-out conversations ask
    // new questions about known entities. No (entity, attribute) pair is
    // asked twice.
    let mut remaining: Vec<Vec<usize>> = (0..n_entities)
        .map(|_| {
            let mut attrs: Vec<usize> = (0..vocab.attributes.len()).collect();
            attrs.shuffle(&mut rng);
            attrs
        })
        .collect();
    let mut asked = HashSet::new();
    let mut plans = Vec::with_capacity(n_conversations);
    for conv in 0..n_conversations {
        let entity = conv % n_entities;
        let pool = &mut remaining[entity];
        let attrs = pool.split_off(pool.len() - turns_per_conv);
        for &a in &attrs {
            asked.insert((entity, a));
        }
        plans.push((entity, attrs));
    }

    let mut facts: Vec<(Fact, Option<(usize, usize)>)> = Vec::with_capacity(n_passages);
    for (conv, (entity, attrs)) in plans.iter().enumerate() {
        let entity = *entity;
        for (turn, &attribute) in attrs.iter().enumerate() {
            let values = sample_values(&mut rng, &vocab);
            facts.push((
                Fact {
                    entity,
                    attribute,
                    values,
                },
                Some((conv, turn)),
            ));
        }
    }
    // Distractors never restate an asked (entity, attribute) pair.
    while facts.len() < n_passages {
        let roll: f64 = rng.gen();
        let (entity, attribute) = if roll < 0.3 {
            (rng.gen_range(0..n_entities), rng.gen_range(0..vocab.attributes.len()))
        } else if roll < 0.6 {
            let (_, plan) = &plans[rng.gen_range(0..n_conversations)];
            (rng.gen_range(0..vocab.entities.len()), plan[rng.gen_range(0..plan.len())])
        } else {
            (rng.gen_range(0..vocab.entities.len()), rng.gen_range(0..vocab.attributes.len()))
        };
        if asked.contains(&(entity, attribute)) {
            continue;
        }
        let values = sample_values(&mut rng, &vocab);
        facts.push((
            Fact {
                entity,
                attribute,
                values,
            },
            None,
        ));
    }
    facts.shuffle(&mut rng);

    let width = n_passages.to_string().len().max(5);
    let mut passages = Vec::with_capacity(n_passages);
    let mut golden: Vec<Vec<Option<Turn>>> = plans.iter().map(|(_, p)| vec![None; p.len()]).collect();
    for (i, (fact, owner)) in facts.iter().enumerate() {
        let pid = format!("p{i:0width$}");
        let (tokens, start) = fact_passage(&mut rng, &vocab, fact);
        if let Some((conv, turn)) = *owner {
            let entity = &vocab.entities[fact.entity];
            let attr = &vocab.attributes[fact.attribute];
            let (question, rewrite) = if turn == 0 {
                let q = format!("what is the {attr} of {entity}");
                (q.clone(), q)
            } else {
                match rng.gen_range(0..3) {
                    0 => (
                        format!("what is the {attr} of it"),
                        format!("what is the {attr} of {entity}"),
                    ),
                    1 => (
                        format!("what about its {attr}"),
                        format!("what about {entity} {attr}"),
                    ),
                    _ => (format!("and its {attr}"), format!("and {entity} {attr}")),
                }
            };
            golden[conv][turn] = Some(Turn {
                qid: format!("c{conv:05}_q{turn}"),
                question_tokens: words(&question),
                rewrite_tokens: words(&rewrite),
                answer_text_tokens: fact.values.clone(),
                golden_pid: pid.clone(),
                answer_start: start,
                answer_end: start + fact.values.len() - 1,
            });
        }
        passages.push(Passage {
            pid,
            title: vocab.entities[fact.entity].clone(),
            tokens,
        });
    }

    let conversations = golden
        .into_iter()
        .enumerate()
        .map(|(ci, turns)| Conversation {
            cid: format!("c{ci:05}"),
            turns: turns.into_iter().map(|t| t.expect("every turn has a golden fact")).collect(),
        })
        .collect();

    Corpus::new(Arc::new(PassageStore::new(passages)?), conversations, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_a_seed() {
        let a = generate_synthetic_corpus(7, 2, 3, 20, 200).unwrap();
        let b = generate_synthetic_corpus(7, 2, 3, 20, 200).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_differ() {
        let a = generate_synthetic_corpus(7, 2, 3, 20, 200).unwrap();
        let b = generate_synthetic_corpus(8, 2, 3, 20, 200).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn answers_slice_from_golden_passages() {
        let c = generate_synthetic_corpus(3, 5, 4, 60, 400).unwrap();
        for conv in c.conversations() {
            assert_eq!(conv.turns.len(), 4);
            for (i, t) in conv.turns.iter().enumerate() {
                let p = c.passage(&t.golden_pid).unwrap();
                assert_eq!(&p.tokens[t.answer_start..=t.answer_end], t.answer_text_tokens.as_slice());
                if i > 0 {
                    assert_ne!(t.question_tokens, t.rewrite_tokens);
                } else {
                    assert_eq!(t.question_tokens, t.rewrite_tokens);
                }
            }
        }
    }

    #[test]
    fn small_vocab_is_rejected() {
        assert!(generate_synthetic_corpus(1, 50, 2, 100, 30).is_err());
        assert!(generate_synthetic_corpus(1, 50, 2, 100, 60).is_ok());
        assert!(generate_synthetic_corpus(1, 0, 2, 100, 600).is_err());
        assert!(generate_synthetic_corpus(1, 10, 2, 5, 600).is_err());
    }

    #[test]
    fn pseudo_words_are_distinct() {
        let set: HashSet<String> = (0..20_000).map(pseudo_word).collect();
        assert_eq!(set.len(), 20_000);
    }
}
