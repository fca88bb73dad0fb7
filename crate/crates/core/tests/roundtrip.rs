use convqa::checkpoint::{Checkpoint, Checksum};
use convqa::config::RunConfig;
use convqa::corpus::{generate_synthetic_corpus, load_corpus, write_conversations, write_passages};
use convqa::curriculum::JointTrainer;
use convqa::experiment;
use convqa::postranker::{rerank, PostRankerParams};
use convqa::retriever::{build_index, PassageIndex};
use proptest::prelude::*;

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for s in [
        "corpus.n_conversations=16",
        "corpus.turns_per_conv=3",
        "corpus.n_passages=80",
        "corpus.vocab_size=200",
        "corpus.dev_conversations=2",
        "corpus.test_conversations=2",
        "encoder.dim=8",
        "encoder.hash_buckets=256",
        "pretrain.steps=30",
        "retrieval.k=10",
        "retrieval.t=3",
        "joint.batch_size=4",
    ] {
        cfg.set(s).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

#[test]
fn corpus_survives_jsonl_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_synthetic_corpus(5, 6, 4, 40, 150).unwrap();
    let passages = dir.path().join("passages.jsonl");
    let convs = dir.path().join("conversations.jsonl");
    write_passages(&passages, corpus.passages()).unwrap();
    write_conversations(&convs, corpus.conversations()).unwrap();
    let back = load_corpus(&passages, &convs).unwrap();
    assert_eq!(back.passages().as_slice(), corpus.passages().as_slice());
    assert_eq!(back.conversations(), corpus.conversations());
}

#[test]
fn index_survives_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let splits = experiment::synthetic_splits(&cfg).unwrap();
    let (_, passage_encoder) = experiment::initial_encoders(&cfg);
    let index = build_index(&passage_encoder, splits.train.passages()).with_config_hash(cfg.hash());
    let path = dir.path().join("passages.index");
    index.save(&path).unwrap();
    let back = PassageIndex::load(&path).unwrap();
    assert_eq!(back.checksum(), index.checksum());
    assert_eq!(back.config_hash(), cfg.hash());
    let q = index.row(3).to_vec();
    assert_eq!(back.retrieve_top_k(&q, 5), index.retrieve_top_k(&q, 5));
}

#[test]
fn resumed_trainer_matches_uninterrupted_trainer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let splits = experiment::synthetic_splits(&cfg).unwrap();
    let pre = experiment::run_pretrain(&cfg, &splits.train).unwrap();
    let index = build_index(&pre.passage_encoder, splits.train.passages());
    let new_trainer = || {
        JointTrainer::new(
            experiment::initial_models(&cfg, pre.question_encoder.clone()),
            experiment::joint_settings(&cfg),
            experiment::curriculum_config(&cfg),
            &splits.train,
            &index,
        )
        .unwrap()
    };

    let mut straight = new_trainer();
    let mut straight_log = Vec::new();
    for _ in 0..12 {
        straight_log.push(straight.step().unwrap());
    }

    let mut first = new_trainer();
    let mut resumed_log = Vec::new();
    for _ in 0..5 {
        resumed_log.push(first.step().unwrap());
    }
    let path = dir.path().join("joint.ckpt");
    first.checkpoint(&cfg.hash()).save(&path).unwrap();
    drop(first);
    let ckpt = Checkpoint::load(&path).unwrap();
    let mut second = JointTrainer::resume(&ckpt, &splits.train, &index).unwrap();
    assert_eq!(second.iteration(), 5);
    for _ in 5..12 {
        resumed_log.push(second.step().unwrap());
    }

    assert_eq!(resumed_log, straight_log);
    assert_eq!(
        second.checkpoint(&cfg.hash()).checksum(),
        straight.checkpoint(&cfg.hash()).checksum()
    );
}

#[test]
fn config_errors_name_the_field() {
    let mut cfg = RunConfig::default();
    cfg.set("retrieval.t=101").unwrap();
    assert!(cfg.validate().unwrap_err().to_string().contains("`T`"));

    let mut cfg = RunConfig::default();
    let err = cfg.set("joint.lr_reader=fast").unwrap_err().to_string();
    assert!(err.contains("joint.lr_reader"), "{err}");

    let mut cfg = RunConfig::default();
    cfg.set("curriculum.lambda_lower=5").unwrap();
    assert!(cfg.validate().unwrap_err().to_string().contains("lambda"));
}

#[test]
fn config_hash_tracks_every_field() {
    let base = RunConfig::default();
    let mut other = base.clone();
    assert_eq!(base.hash(), other.hash());
    other.set("reader.max_span_len=11").unwrap();
    assert_ne!(base.hash(), other.hash());
}

fn index_strategy() -> impl Strategy<Value = (PassageIndex, Vec<f64>)> {
    (1usize..5, 1usize..40).prop_flat_map(|(dim, n)| {
        let values = prop::collection::vec(-4i32..=4, dim * n);
        let query = prop::collection::vec(-4i32..=4, dim);
        (values, query).prop_map(move |(values, query)| {
            let ids = (0..n).map(|i| format!("p{i:03}")).collect();
            let matrix = values.into_iter().map(|v| v as f64 * 0.25).collect();
            let index = PassageIndex::from_rows(ids, dim, matrix, Checksum::default()).unwrap();
            (index, query.into_iter().map(|v| v as f64 * 0.5).collect())
        })
    })
}

proptest! {
    #[test]
    fn identity_postranker_keeps_retrieval_order((index, q) in index_strategy(), k in 1usize..50) {
        let retrieved = index.retrieve_top_k(&q, k);
        prop_assert_eq!(retrieved.len(), k.min(index.len()));
        let reranked = rerank(&PostRankerParams::identity(index.dim()), &q, retrieved.pids(), &index).unwrap();
        prop_assert!(reranked.pids().eq(retrieved.pids()));
    }

    #[test]
    fn retrieval_is_sorted_with_pid_ties((index, q) in index_strategy(), k in 1usize..50) {
        let ranked = index.retrieve_top_k(&q, k).ranked;
        for w in ranked.windows(2) {
            prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].pid < w[1].pid));
        }
        // Nothing left out scores higher than the last kept passage.
        if let Some(last) = ranked.last() {
            for (i, pid) in index.ids().iter().enumerate() {
                if !ranked.iter().any(|s| &s.pid == pid) {
                    let s: f64 = index.row(i).iter().zip(&q).map(|(a, b)| a * b).sum();
                    prop_assert!(s < last.score || (s == last.score && pid > &last.pid));
                }
            }
        }
    }
}
