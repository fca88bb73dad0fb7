//! Joint loss over retriever, post-ranker and reader, and the training loop
//! that gates golden-passage injection with the curriculum.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{difficulty_coefficient, inject_golden, CurriculumConfig, CurriculumState};
use crate::checkpoint::{Checkpoint, Checksum};
use crate::corpus::{serialize_en, serialize_rd, Conversation, Corpus, PassageStore, Turn};
use crate::encoder::{backprop, encode, EncoderGrad, EncoderParams};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::postranker::{postranker_loss, rerank, PostRankerGrad, PostRankerMargins, PostRankerParams};
use crate::reader::{reader_loss, ReaderGrad, ReaderParams};
use crate::retriever::{retriever_finetune_loss, PassageIndex};

/// The parameters joint training updates. The passage encoder stays frozen
/// behind the index.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModels {
    pub question_encoder: EncoderParams,
    pub postranker: PostRankerParams,
    pub reader: ReaderParams,
}

impl JointModels {
    pub fn push_to(&self, ckpt: &mut Checkpoint) {
        let d = self.postranker.dim();
        ckpt.push_encoder("question", &self.question_encoder);
        ckpt.push("postranker.weight", vec![d, d], self.postranker.weight.clone());
        ckpt.push("postranker.bias", vec![d], self.postranker.bias.clone());
        ckpt.push_encoder("reader", &self.reader.encoder);
        let r = self.reader.dim();
        ckpt.push("reader.w_start", vec![r], self.reader.w_start.clone());
        ckpt.push("reader.w_end", vec![r], self.reader.w_end.clone());
        ckpt.push("reader.w_select", vec![r], self.reader.w_select.clone());
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let question_encoder = ckpt.encoder("question")?;
        let weight = ckpt.require("postranker.weight")?;
        let postranker = PostRankerParams::from_parts(
            weight.shape[0],
            weight.data.clone(),
            ckpt.require("postranker.bias")?.data.clone(),
        )?;
        let encoder = ckpt.encoder("reader")?;
        let vector = |name: &str| -> Result<Vec<f64>> {
            let t = ckpt.require(name)?;
            if t.data.len() != encoder.dim() {
                return Err(Error::DimensionMismatch {
                    expected: encoder.dim(),
                    actual: t.data.len(),
                });
            }
            Ok(t.data.clone())
        };
        let reader = ReaderParams {
            w_start: vector("reader.w_start")?,
            w_end: vector("reader.w_end")?,
            w_select: vector("reader.w_select")?,
            encoder,
        };
        if postranker.dim() != question_encoder.dim() {
            return Err(Error::DimensionMismatch {
                expected: question_encoder.dim(),
                actual: postranker.dim(),
            });
        }
        Ok(Self {
            question_encoder,
            postranker,
            reader,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSettings {
    pub k: usize,
    pub t: usize,
    pub window: usize,
    pub margins: PostRankerMargins,
    /// When false the post-ranker keeps its parameters and contributes no loss.
    pub train_postranker: bool,
    /// When false every iteration injects the golden passage.
    pub curriculum: bool,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr_retriever: f64,
    pub lr_postranker: f64,
    pub lr_reader: f64,
}

/// One question of a batch.
#[derive(Debug, Clone, Copy)]
pub struct QuestionRef<'a> {
    pub conversation: &'a Conversation,
    pub turn: usize,
}

impl<'a> QuestionRef<'a> {
    pub fn turn(&self) -> &'a Turn {
        &self.conversation.turns[self.turn]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLossBreakdown {
    pub retriever: f64,
    pub postranker: f64,
    pub reader: f64,
    pub total: f64,
    pub v: u8,
    pub p_b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointGrad {
    pub question: EncoderGrad,
    pub postranker: PostRankerGrad,
    pub reader: ReaderGrad,
}

impl JointGrad {
    fn new(models: &JointModels) -> Self {
        Self {
            question: EncoderGrad::for_params(&models.question_encoder),
            postranker: PostRankerGrad::new(models.postranker.dim()),
            reader: ReaderGrad::new(models.reader.dim()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointLossOutput {
    pub breakdown: JointLossBreakdown,
    pub grad: JointGrad,
    /// Questions whose golden passage never reached a module, so only the
    /// retriever loss was measured for them.
    pub skipped: usize,
    /// Questions whose golden answer was cut off by reader truncation.
    pub truncated: usize,
}

struct QuestionLoss {
    retriever: f64,
    postranker: f64,
    reader: f64,
    question: EncoderGrad,
    postranker_grad: Option<PostRankerGrad>,
    reader_grad: Option<ReaderGrad>,
    skipped: bool,
    truncated: bool,
}

fn question_loss(
    models: &JointModels,
    settings: &JointSettings,
    index: &PassageIndex,
    passages: &PassageStore,
    q: QuestionRef<'_>,
    candidates: &[String],
    v: u8,
) -> Result<QuestionLoss> {
    let turn = q.turn();
    let golden = turn.golden_pid.as_str();
    let lookup = |pid: &str| index.embedding(pid).ok_or_else(|| Error::UnknownPassage(pid.to_owned()));
    let (d_q, trace) = encode(&models.question_encoder, &serialize_en(q.conversation, q.turn, settings.window));
    let mut embeddings = candidates.iter().map(|p| lookup(p)).collect::<Result<Vec<_>>>()?;
    let mut out = QuestionLoss {
        retriever: 0.0,
        postranker: 0.0,
        reader: 0.0,
        question: EncoderGrad::for_params(&models.question_encoder),
        postranker_grad: None,
        reader_grad: None,
        skipped: false,
        truncated: false,
    };

    let Some(pos) = candidates.iter().position(|p| p == golden) else {
        if v == 1 {
            return Err(Error::PositiveAbsent(golden.to_owned()));
        }
        // The retriever missed the golden passage: its loss still feeds the
        // curriculum, but nothing downstream can learn from this question.
        embeddings.push(lookup(golden)?);
        out.retriever = retriever_finetune_loss(&d_q, &embeddings, embeddings.len() - 1)?.loss;
        out.skipped = true;
        return Ok(out);
    };

    let retr = retriever_finetune_loss(&d_q, &embeddings, pos)?;
    out.retriever = retr.loss;
    let mut grad_q = retr.grad_question;
    if settings.train_postranker {
        let post = postranker_loss(&models.postranker, &d_q, &embeddings, pos, settings.margins)?;
        out.postranker = post.loss;
        crate::math::axpy(&mut grad_q, 1.0, &post.grad_question);
        out.postranker_grad = Some(post.grad);
    }
    backprop(&models.question_encoder, &trace, &grad_q, &mut out.question)?;

    let reranked = rerank(&models.postranker, &d_q, candidates.iter().map(String::as_str), index)?;
    let mut reader_set: Vec<&str> = reranked.top(settings.t).iter().map(|s| s.pid.as_str()).collect();
    if !reader_set.contains(&golden) {
        if v == 1 {
            reader_set.push(golden);
        } else {
            out.skipped = true;
            return Ok(out);
        }
    }
    let golden_at = reader_set.iter().position(|p| *p == golden).expect("golden in reader set");
    let reader_passages = reader_set
        .iter()
        .map(|pid| passages.get(pid).ok_or_else(|| Error::UnknownPassage((*pid).to_owned())))
        .collect::<Result<Vec<_>>>()?;
    let q_rd = serialize_rd(q.conversation, q.turn, settings.window);
    match reader_loss(&models.reader, &q_rd, &reader_passages, golden_at, turn.answer_start, turn.answer_end)? {
        Some(r) => {
            out.reader = r.loss;
            out.reader_grad = Some(r.grad);
        }
        None => out.truncated = true,
    }
    Ok(out)
}

/// Sum of the three module losses, each averaged over the batch, with
/// gradients for every trained parameter. `candidates[i]` lists the pids
/// offered for question `i`; when `v = 1` each must contain the golden pid.
pub fn joint_loss(
    models: &JointModels,
    settings: &JointSettings,
    index: &PassageIndex,
    passages: &PassageStore,
    batch: &[QuestionRef<'_>],
    candidates: &[Vec<String>],
    v: u8,
) -> Result<JointLossOutput> {
    assert_eq!(batch.len(), candidates.len(), "one candidate list per question");
    if batch.is_empty() {
        return Err(Error::InvalidCorpus("empty training batch".into()));
    }
    let per_question = batch
        .par_iter()
        .zip(candidates)
        .map(|(q, c)| question_loss(models, settings, index, passages, *q, c, v))
        .collect::<Result<Vec<_>>>()?;

    let mut grad = JointGrad::new(models);
    let mut out = JointLossOutput {
        breakdown: JointLossBreakdown {
            retriever: 0.0,
            postranker: 0.0,
            reader: 0.0,
            total: 0.0,
            v,
            p_b: v as f64,
        },
        grad: grad.clone(),
        skipped: 0,
        truncated: 0,
    };
    let b = &mut out.breakdown;
    for q in &per_question {
        b.retriever += q.retriever;
        b.postranker += q.postranker;
        b.reader += q.reader;
        grad.question.add_assign(&q.question);
        if let Some(g) = &q.postranker_grad {
            grad.postranker.add_assign(g);
        }
        if let Some(g) = &q.reader_grad {
            grad.reader.add_assign(g);
        }
        out.skipped += q.skipped as usize;
        out.truncated += q.truncated as usize;
    }
    let scale = 1.0 / batch.len() as f64;
    b.retriever *= scale;
    b.postranker *= scale;
    b.reader *= scale;
    b.total = b.retriever + b.postranker + b.reader;
    grad.question.scale(scale);
    grad.postranker.scale(scale);
    grad.reader.scale(scale);
    out.grad = grad;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub iter: u64,
    pub v: u8,
    pub p_b: f64,
    pub loss_retriever: f64,
    pub loss_postranker: f64,
    pub loss_reader: f64,
    pub loss_total: f64,
    pub skipped: usize,
}

/// Curriculum-gated joint training, one batch per [`JointTrainer::step`].
pub struct JointTrainer<'a> {
    pub models: JointModels,
    pub settings: JointSettings,
    pub curriculum_config: CurriculumConfig,
    pub curriculum: CurriculumState,
    batch_rng: ChaCha8Rng,
    optimizer: Optimizer,
    corpus: &'a Corpus,
    index: &'a PassageIndex,
    refs: Vec<(usize, usize)>,
}

impl<'a> JointTrainer<'a> {
    pub fn new(
        models: JointModels,
        settings: JointSettings,
        curriculum_config: CurriculumConfig,
        corpus: &'a Corpus,
        index: &'a PassageIndex,
    ) -> Result<Self> {
        curriculum_config.validate()?;
        let refs = corpus.turn_refs();
        if refs.is_empty() {
            return Err(Error::InvalidCorpus("no training questions".into()));
        }
        if settings.t == 0 || settings.t > settings.k {
            return Err(Error::config("T", "must satisfy 1 <= T <= K"));
        }
        Ok(Self {
            batch_rng: ChaCha8Rng::seed_from_u64(curriculum_config.seed ^ 0xba7c_4e5),
            curriculum: CurriculumState::new(&curriculum_config),
            optimizer: Optimizer::new(settings.optimizer),
            models,
            settings,
            curriculum_config,
            corpus,
            index,
            refs,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.curriculum.iteration
    }

    /// Runs one iteration and applies its update.
    pub fn step(&mut self) -> Result<TrainLogEntry> {
        let (v, p_b) = if self.settings.curriculum {
            difficulty_coefficient(&mut self.curriculum, &self.curriculum_config)
        } else {
            (1, 1.0)
        };
        let size = self.settings.batch_size.clamp(1, self.refs.len());
        let batch: Vec<QuestionRef<'_>> = sample(&mut self.batch_rng, self.refs.len(), size)
            .into_iter()
            .map(|i| {
                let (c, t) = self.refs[i];
                QuestionRef {
                    conversation: &self.corpus.conversations()[c],
                    turn: t,
                }
            })
            .collect();
        let candidates: Vec<Vec<String>> = batch
            .par_iter()
            .map(|q| {
                let seq = serialize_en(q.conversation, q.turn, self.settings.window);
                let d_q = encode(&self.models.question_encoder, &seq).0;
                let retrieved = self.index.retrieve_top_k(&d_q, self.settings.k);
                if v == 1 {
                    inject_golden(&retrieved, &q.turn().golden_pid)
                } else {
                    retrieved.pids().map(str::to_owned).collect()
                }
            })
            .collect();
        let out = joint_loss(
            &self.models,
            &self.settings,
            self.index,
            self.corpus.passages(),
            &batch,
            &candidates,
            v,
        )?;
        let b = out.breakdown;
        if ![b.retriever, b.postranker, b.reader].iter().all(|l| l.is_finite()) {
            let dump = batch
                .iter()
                .zip(&candidates)
                .map(|(q, c)| format!("{} [{}]", q.turn().qid, c.join(" ")))
                .collect::<Vec<_>>()
                .join("; ");
            return Err(Error::NonFiniteLoss {
                iteration: self.curriculum.iteration,
                dump,
            });
        }
        let s = &self.settings;
        let (m, g, opt) = (&mut self.models, &out.grad, &mut self.optimizer);
        opt.tick();
        opt.update_encoder("question", &mut m.question_encoder, &g.question, s.lr_retriever);
        if s.train_postranker {
            opt.update_dense("postranker.weight", &mut m.postranker.weight, &g.postranker.weight, s.lr_postranker);
            opt.update_dense("postranker.bias", &mut m.postranker.bias, &g.postranker.bias, s.lr_postranker);
        }
        opt.update_encoder("reader", &mut m.reader.encoder, &g.reader.encoder, s.lr_reader);
        opt.update_dense("reader.w_start", &mut m.reader.w_start, &g.reader.w_start, s.lr_reader);
        opt.update_dense("reader.w_end", &mut m.reader.w_end, &g.reader.w_end, s.lr_reader);
        opt.update_dense("reader.w_select", &mut m.reader.w_select, &g.reader.w_select, s.lr_reader);
        let entry = TrainLogEntry {
            iter: self.curriculum.iteration,
            v,
            p_b,
            loss_retriever: b.retriever,
            loss_postranker: b.postranker,
            loss_reader: b.reader,
            loss_total: b.total,
            skipped: out.skipped,
        };
        self.curriculum.record(b.retriever);
        Ok(entry)
    }

    /// Full trainer state, resumable with [`JointTrainer::resume`].
    pub fn checkpoint(&self, config_hash: &str) -> Checkpoint {
        let mut ckpt = Checkpoint::new("joint", config_hash);
        self.models.push_to(&mut ckpt);
        self.optimizer.push_to(&mut ckpt);
        ckpt.meta = serde_json::json!({
            "optimizer": self.optimizer.state_meta(),
            "index_checksum": self.index.checksum().to_hex(),
            "curriculum": self.curriculum,
            "batch_rng": self.batch_rng,
            "settings": self.settings,
            "curriculum_config": self.curriculum_config,
        });
        ckpt
    }

    pub fn resume(ckpt: &Checkpoint, corpus: &'a Corpus, index: &'a PassageIndex) -> Result<Self> {
        let bad = |message: String| Error::BadArtifact {
            path: Default::default(),
            message,
        };
        let field = |name: &str| ckpt.meta.get(name).cloned().ok_or_else(|| bad(format!("missing {name}")));
        let recorded = field("index_checksum")?;
        if recorded.as_str().and_then(Checksum::from_hex) != Some(index.checksum()) {
            return Err(bad("checkpoint was trained against a different index".into()));
        }
        let parse = |name: &str| field(name);
        let settings = serde_json::from_value(parse("settings")?).map_err(|e| bad(e.to_string()))?;
        let cfg = serde_json::from_value(parse("curriculum_config")?).map_err(|e| bad(e.to_string()))?;
        let mut trainer = Self::new(JointModels::from_checkpoint(ckpt)?, settings, cfg, corpus, index)?;
        trainer.curriculum = serde_json::from_value(parse("curriculum")?).map_err(|e| bad(e.to_string()))?;
        trainer.batch_rng = serde_json::from_value(parse("batch_rng")?).map_err(|e| bad(e.to_string()))?;
        trainer.optimizer = Optimizer::from_checkpoint(ckpt, &parse("optimizer")?)?;
        Ok(trainer)
    }
}

/// Trains for `iterations` steps and returns the final models with the log.
pub fn train_scheduler(
    corpus: &Corpus,
    index: &PassageIndex,
    models: JointModels,
    settings: JointSettings,
    cfg: CurriculumConfig,
    iterations: usize,
) -> Result<(JointModels, Vec<TrainLogEntry>)> {
    let mut trainer = JointTrainer::new(models, settings, cfg, corpus, index)?;
    let log = (0..iterations).map(|_| trainer.step()).collect::<Result<Vec<_>>>()?;
    Ok((trainer.models, log))
}
