//! Whole-run orchestration shared by the command line and the tests:
//! corpus generation, pre-training, indexing, joint training, evaluation and
//! the ablation variants.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{Corpus, PassageStore};
use crate::curriculum::{train_scheduler, CurriculumConfig, JointModels, JointSettings, TrainLogEntry};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, Stopwords};
use crate::pipeline::{evaluate_split, EvalOptions, Evaluation, PipelineBundle};
use crate::postranker::PostRankerParams;
use crate::reader::ReaderParams;
use crate::retriever::{build_index, build_pretrain_instances, pretrain, PassageIndex, PretrainLogEntry};

/// Independent sub-seeds so that every model gets its own stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // SplitMix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const QUESTION_STREAM: u64 = 1;
const PASSAGE_STREAM: u64 = 2;
const READER_STREAM: u64 = 3;
const PRETRAIN_STREAM: u64 = 4;
const JOINT_STREAM: u64 = 5;

/// Train, dev and test partitions of one corpus.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

pub fn synthetic_splits(cfg: &RunConfig) -> Result<Splits> {
    let corpus = cfg.corpus.synthetic().generate()?;
    split_corpus(&corpus, cfg)
}

pub fn split_corpus(corpus: &Corpus, cfg: &RunConfig) -> Result<Splits> {
    let (train, dev, test) = corpus.partition(cfg.corpus.dev_conversations, cfg.corpus.test_conversations)?;
    Ok(Splits { train, dev, test })
}

/// Freshly initialized (untrained) question and passage encoders.
pub fn initial_encoders(cfg: &RunConfig) -> (EncoderParams, EncoderParams) {
    let e = &cfg.encoder;
    (
        EncoderParams::random(e.dim, e.hash_buckets, derive_seed(cfg.seed, QUESTION_STREAM)),
        EncoderParams::random(e.dim, e.hash_buckets, derive_seed(cfg.seed, PASSAGE_STREAM)),
    )
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub question_encoder: EncoderParams,
    pub passage_encoder: EncoderParams,
    pub log: Vec<PretrainLogEntry>,
}

pub fn run_pretrain(cfg: &RunConfig, train: &Corpus) -> Result<Pretrained> {
    let (mut question_encoder, mut passage_encoder) = initial_encoders(cfg);
    let instances = build_pretrain_instances(train, cfg.retrieval.window)?;
    let mut pcfg = cfg.pretrain_config();
    pcfg.seed = derive_seed(cfg.seed, PRETRAIN_STREAM);
    let log = pretrain(&mut question_encoder, &mut passage_encoder, &instances, train.passages(), &pcfg)?;
    Ok(Pretrained {
        question_encoder,
        passage_encoder,
        log,
    })
}

/// Joint-training starting point: identity post-ranker and a random reader.
pub fn initial_models(cfg: &RunConfig, question_encoder: EncoderParams) -> JointModels {
    let dim = question_encoder.dim();
    JointModels {
        postranker: PostRankerParams::identity(dim),
        reader: ReaderParams::random(dim, cfg.encoder.hash_buckets, derive_seed(cfg.seed, READER_STREAM)),
        question_encoder,
    }
}

pub fn joint_settings(cfg: &RunConfig) -> JointSettings {
    JointSettings {
        k: cfg.retrieval.k,
        t: cfg.retrieval.t,
        window: cfg.retrieval.window,
        margins: cfg.margins(),
        train_postranker: cfg.postranker.enabled,
        curriculum: cfg.curriculum.enabled,
        batch_size: cfg.joint.batch_size,
        optimizer: cfg.joint.optimizer,
        lr_retriever: cfg.joint.lr_retriever,
        lr_postranker: cfg.joint.lr_postranker,
        lr_reader: cfg.joint.lr_reader,
    }
}

pub fn curriculum_config(cfg: &RunConfig) -> CurriculumConfig {
    CurriculumConfig {
        lambda_lower: cfg.curriculum.lambda_lower,
        lambda_upper: cfg.curriculum.lambda_upper,
        seed: derive_seed(cfg.seed, JOINT_STREAM),
    }
}

pub fn run_joint(
    cfg: &RunConfig,
    train: &Corpus,
    index: &PassageIndex,
    models: JointModels,
) -> Result<(JointModels, Vec<TrainLogEntry>)> {
    train_scheduler(
        train,
        index,
        models,
        joint_settings(cfg),
        curriculum_config(cfg),
        cfg.joint.iterations,
    )
}

pub fn bundle(
    cfg: &RunConfig,
    models: JointModels,
    index: PassageIndex,
    passages: Arc<PassageStore>,
) -> Result<PipelineBundle> {
    let mut b = PipelineBundle::new(models, index, passages, cfg.retrieval.k, cfg.retrieval.t, cfg.retrieval.window)?;
    b.max_span_len = cfg.reader.max_span_len;
    b.top_n = cfg.reader.top_n;
    Ok(b)
}

pub fn eval_options(cfg: &RunConfig) -> Result<EvalOptions> {
    let stopwords = match &cfg.metrics.stopwords_path {
        Some(p) => Stopwords::load(p)?,
        None => Stopwords::default(),
    };
    Ok(EvalOptions {
        t: cfg.retrieval.t,
        stopwords,
        human_f1: cfg.metrics.human_f1,
    })
}

/// Ablation variants of the full system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Pre-training without the KL consistency term.
    NoKl,
    /// Post-ranker left at identity: the reader sees retriever order.
    NoPostranker,
    /// Golden passage injected on every iteration.
    NoCurriculum,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoKl, Variant::NoPostranker, Variant::NoCurriculum];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoKl => "no_kl",
            Variant::NoPostranker => "no_postranker",
            Variant::NoCurriculum => "no_curriculum",
        }
    }

    /// The configuration this variant runs with.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut out = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoKl => out.pretrain.alpha = 0.0,
            Variant::NoPostranker => out.postranker.enabled = false,
            Variant::NoCurriculum => out.curriculum.enabled = false,
        }
        out
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| Error::config("variant", format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: Variant,
    pub config: RunConfig,
    pub pretrain_log: Vec<PretrainLogEntry>,
    pub train_log: Vec<TrainLogEntry>,
    pub dev: Evaluation,
    pub bundle: PipelineBundle,
}

/// Pre-trained encoders and their index, reusable across variants that share
/// a pre-training configuration.
#[derive(Debug, Clone)]
pub struct RetrieverStage {
    pub pretrained: Pretrained,
    pub index: PassageIndex,
}

pub fn retriever_stage(cfg: &RunConfig, splits: &Splits) -> Result<RetrieverStage> {
    let pretrained = run_pretrain(cfg, &splits.train)?;
    let index = build_index(&pretrained.passage_encoder, splits.train.passages()).with_config_hash(cfg.hash());
    Ok(RetrieverStage { pretrained, index })
}

/// Joint training plus dev evaluation on top of an existing retriever stage.
pub fn run_variant_from(
    cfg: &RunConfig,
    variant: Variant,
    splits: &Splits,
    stage: &RetrieverStage,
) -> Result<VariantRun> {
    let vcfg = variant.apply(cfg);
    vcfg.validate()?;
    let models = initial_models(&vcfg, stage.pretrained.question_encoder.clone());
    let (models, train_log) = run_joint(&vcfg, &splits.train, &stage.index, models)?;
    let bundle = bundle(&vcfg, models, stage.index.clone(), splits.train.shared_passages())?;
    let dev = evaluate_split(&bundle, &splits.dev, &eval_options(&vcfg)?)?;
    Ok(VariantRun {
        variant,
        config: vcfg,
        pretrain_log: stage.pretrained.log.clone(),
        train_log,
        dev,
        bundle,
    })
}

pub fn run_variant(cfg: &RunConfig, variant: Variant, splits: &Splits) -> Result<VariantRun> {
    let stage = retriever_stage(&variant.apply(cfg), splits)?;
    run_variant_from(cfg, variant, splits, &stage)
}

/// Retrieval-only evaluation: identity post-ranker, untrained reader.
pub fn retrieval_report(cfg: &RunConfig, stage: &RetrieverStage, corpus: &Corpus) -> Result<MetricsReport> {
    let models = initial_models(cfg, stage.pretrained.question_encoder.clone());
    let b = bundle(cfg, models, stage.index.clone(), corpus.shared_passages())?;
    Ok(evaluate_split(&b, corpus, &eval_options(cfg)?)?.report)
}

/// One row of an ablation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: String,
    pub report: MetricsReport,
}

/// Number of questions whose golden passage lands in the top T.
pub fn golden_in_top_t(bundle: &PipelineBundle, corpus: &Corpus) -> Result<usize> {
    use crate::pipeline::QaSystem;
    let mut hits = 0;
    for conv in corpus.conversations() {
        for (t, turn) in conv.turns.iter().enumerate() {
            let inference = bundle.infer(conv, t)?;
            hits += inference.ranked.iter().any(|s| s.pid == turn.golden_pid) as usize;
        }
    }
    Ok(hits)
}

/// Everything the directional ablation study measures for one training seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStudy {
    pub seed: u64,
    /// Dev Recall@T straight after pre-training, with and without the KL term.
    pub pretrain_recall_kl: f64,
    pub pretrain_recall_no_kl: f64,
    pub rows: Vec<AblationRow>,
    /// Dev questions with the golden passage in the top T, using the fully
    /// trained system with its post-ranker replaced by the identity, and as
    /// trained.
    pub golden_in_t_identity: usize,
    pub golden_in_t_trained: usize,
}

impl SeedStudy {
    pub fn f1(&self, variant: Variant) -> f64 {
        self.rows
            .iter()
            .find(|r| r.variant == variant)
            .map_or(f64::NAN, |r| r.report.f1)
    }
}

/// Runs every variant for `cfg.seed` on a fixed corpus.
pub fn seed_study(cfg: &RunConfig, splits: &Splits) -> Result<SeedStudy> {
    let with_kl = retriever_stage(cfg, splits)?;
    let no_kl_cfg = Variant::NoKl.apply(cfg);
    let without_kl = retriever_stage(&no_kl_cfg, splits)?;
    let pretrain_recall_kl = retrieval_report(cfg, &with_kl, &splits.dev)?.recall;
    let pretrain_recall_no_kl = retrieval_report(&no_kl_cfg, &without_kl, &splits.dev)?.recall;

    let mut rows = Vec::new();
    let mut golden = (0, 0);
    for variant in Variant::ALL {
        let stage = if variant == Variant::NoKl { &without_kl } else { &with_kl };
        let run = run_variant_from(cfg, variant, splits, stage)?;
        if variant == Variant::Full {
            let mut identity = run.bundle.clone();
            identity.postranker = PostRankerParams::identity(identity.postranker.dim());
            golden = (
                golden_in_top_t(&identity, &splits.dev)?,
                golden_in_top_t(&run.bundle, &splits.dev)?,
            );
        }
        rows.push(AblationRow {
            variant,
            seed: cfg.seed,
            config_hash: run.config.hash(),
            report: run.dev.report,
        });
    }
    Ok(SeedStudy {
        seed: cfg.seed,
        pretrain_recall_kl,
        pretrain_recall_no_kl,
        rows,
        golden_in_t_identity: golden.0,
        golden_in_t_trained: golden.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_change_one_field_each() {
        let base = RunConfig::default();
        assert_eq!(Variant::Full.apply(&base), base);
        assert_eq!(Variant::NoKl.apply(&base).pretrain.alpha, 0.0);
        assert!(!Variant::NoPostranker.apply(&base).postranker.enabled);
        assert!(!Variant::NoCurriculum.apply(&base).curriculum.enabled);
        for v in Variant::ALL {
            assert_eq!(v.label().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 1), derive_seed(1, 2));
        assert_ne!(derive_seed(1, 1), derive_seed(2, 1));
        assert_eq!(derive_seed(3, 4), derive_seed(3, 4));
    }
}
