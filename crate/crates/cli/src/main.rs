use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use convqa::checkpoint::Checkpoint;
use convqa::config::RunConfig;
use convqa::corpus::{load_passages, write_conversations, write_passages, Conversation, Corpus, Split, Turn};
use convqa::curriculum::{JointModels, JointTrainer, TrainLogEntry};
use convqa::experiment::{self, Splits, Variant};
use convqa::metrics::{MetricsReport, REPORT_CSV_HEADER};
use convqa::pipeline::{answer_question, evaluate_split, Answer};
use convqa::retriever::{build_index, PassageIndex};

#[derive(Parser)]
#[command(name = "convqa", version, about = "Conversational open-retrieval question answering")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to every missing field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `retrieval.t=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Top-level seed; shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, default_value = "run", global = true)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its train/dev/test split.
    GenCorpus,
    /// Pre-train the question and passage encoders.
    Pretrain(CorpusArg),
    /// Encode every passage with the pre-trained passage encoder.
    Index(CorpusArg),
    /// Curriculum-gated joint training of retriever, post-ranker and reader.
    Train {
        #[command(flatten)]
        corpus: CorpusArg,
        /// Continue from a joint checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate the trained system on a split and write a metrics report.
    Eval {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Answer one question and print the answer as JSON.
    Ask {
        #[command(flatten)]
        corpus: CorpusArg,
        /// Question text. Earlier turns go in `--history`.
        #[arg(long, conflicts_with_all = ["cid", "turn"])]
        question: Option<String>,
        /// Earlier questions of the conversation, oldest first. Repeatable.
        #[arg(long, requires = "question")]
        history: Vec<String>,
        /// Conversation id from the chosen split.
        #[arg(long, requires = "turn")]
        cid: Option<String>,
        /// Zero-based turn index within `--cid`.
        #[arg(long, requires = "cid")]
        turn: Option<usize>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Train and evaluate the full system and its ablations.
    Ablate {
        #[command(flatten)]
        corpus: CorpusArg,
        /// Variants to run; all of them by default.
        #[arg(long = "variant", value_name = "NAME")]
        variants: Vec<String>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
}

#[derive(Args)]
struct CorpusArg {
    /// Directory with passages.jsonl and {train,dev,test}.jsonl; defaults to
    /// `<out>/corpus`.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Dev => "dev",
            SplitArg::Test => "test",
        }
    }

    fn pick(self, splits: &Splits) -> &Corpus {
        match self {
            SplitArg::Train => &splits.train,
            SplitArg::Dev => &splits.dev,
            SplitArg::Test => &splits.test,
        }
    }
}

const PRETRAIN_CKPT: &str = "pretrain.ckpt";
const INDEX_FILE: &str = "passages.index";
const JOINT_CKPT: &str = "joint.ckpt";

struct Ctx {
    cfg: RunConfig,
    hash: String,
    out: PathBuf,
}

impl Ctx {
    fn corpus_dir(&self, arg: &CorpusArg) -> PathBuf {
        arg.corpus.clone().unwrap_or_else(|| self.out.join("corpus"))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Loads a checkpoint and refuses it if another config produced it.
    fn checkpoint(&self, name: &str) -> Result<Checkpoint> {
        let path = self.path(name);
        let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
        self.same_config(&path, &ckpt.config_hash)?;
        Ok(ckpt)
    }

    fn index(&self) -> Result<PassageIndex> {
        let path = self.path(INDEX_FILE);
        let index = PassageIndex::load(&path).with_context(|| format!("loading {}", path.display()))?;
        self.same_config(&path, index.config_hash())?;
        Ok(index)
    }

    fn same_config(&self, path: &Path, hash: &str) -> Result<()> {
        if hash != self.hash {
            bail!(
                "{} was produced by config {hash}, but this run resolves to config {}; \
                 rerun the earlier stages with the same config and overrides",
                path.display(),
                self.hash
            );
        }
        Ok(())
    }
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CONVQA_LOG_LEVEL", "info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for assignment in &common.sets {
        cfg.set(assignment)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::GenCorpus => "gen-corpus",
        Command::Pretrain(_) => "pretrain",
        Command::Index(_) => "index",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Ask { .. } => "ask",
        Command::Ablate { .. } => "ablate",
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    let out = cli.common.out.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let ctx = Ctx {
        hash: cfg.hash(),
        cfg,
        out,
    };
    let name = command_name(&cli.command);
    info!("{name}: config {} seed {}", ctx.hash, ctx.cfg.seed);
    let result = match cli.command {
        Command::GenCorpus => gen_corpus(&ctx),
        Command::Pretrain(c) => pretrain(&ctx, &c),
        Command::Index(c) => index(&ctx, &c),
        Command::Train { corpus, resume } => train(&ctx, &corpus, resume.as_deref()),
        Command::Eval { corpus, split } => eval(&ctx, &corpus, split),
        Command::Ask {
            corpus,
            question,
            history,
            cid,
            turn,
            split,
        } => ask(&ctx, &corpus, question, history, cid.zip(turn), split),
        Command::Ablate {
            corpus,
            variants,
            split,
        } => ablate(&ctx, &corpus, &variants, split),
    };
    result?;
    ctx.cfg.save(ctx.path(&format!("{name}.config.json")))?;
    Ok(())
}

fn load_splits(dir: &Path) -> Result<Splits> {
    let passages = Arc::new(
        load_passages(dir.join("passages.jsonl")).with_context(|| format!("loading corpus from {}", dir.display()))?,
    );
    let split = |name: &str, split: Split| -> Result<Corpus> {
        let convs = convqa::corpus::load_split(dir.join("passages.jsonl"), dir.join(format!("{name}.jsonl")), split)
            .with_context(|| format!("loading {name} split"))?
            .conversations()
            .to_vec();
        Ok(Corpus::new(passages.clone(), convs, split)?)
    };
    Ok(Splits {
        train: split("train", Split::Train)?,
        dev: split("dev", Split::Dev)?,
        test: split("test", Split::Test)?,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_corpus(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.cfg.corpus.synthetic().generate()?;
    let splits = experiment::split_corpus(&corpus, &ctx.cfg)?;
    let dir = ctx.path("corpus");
    fs::create_dir_all(&dir)?;
    write_passages(dir.join("passages.jsonl"), corpus.passages())?;
    for (name, part) in [("train", &splits.train), ("dev", &splits.dev), ("test", &splits.test)] {
        write_conversations(dir.join(format!("{name}.jsonl")), part.conversations())?;
    }
    write_json(
        &dir.join("manifest.json"),
        &json!({
            "config_hash": ctx.hash,
            "corpus": ctx.cfg.corpus,
            "passages": corpus.passages().len(),
            "conversations": {
                "train": splits.train.conversations().len(),
                "dev": splits.dev.conversations().len(),
                "test": splits.test.conversations().len(),
            },
        }),
    )?;
    info!(
        "wrote {} passages and {} conversations to {}",
        corpus.passages().len(),
        corpus.conversations().len(),
        dir.display()
    );
    Ok(())
}

fn pretrain(ctx: &Ctx, corpus: &CorpusArg) -> Result<()> {
    let splits = load_splits(&ctx.corpus_dir(corpus))?;
    let pre = experiment::run_pretrain(&ctx.cfg, &splits.train)?;
    let mut ckpt = Checkpoint::new("pretrain", ctx.hash.clone());
    ckpt.push_encoder("question", &pre.question_encoder);
    ckpt.push_encoder("passage", &pre.passage_encoder);
    ckpt.meta = json!({ "seed": ctx.cfg.seed, "steps": pre.log.len() });
    ckpt.save(ctx.path(PRETRAIN_CKPT))?;
    write_jsonl(&ctx.path("pretrain_log.jsonl"), &pre.log)?;
    if let Some(last) = pre.log.last() {
        info!("pre-training done, final loss {:.4}", last.loss);
    }
    Ok(())
}

fn index(ctx: &Ctx, corpus: &CorpusArg) -> Result<()> {
    let splits = load_splits(&ctx.corpus_dir(corpus))?;
    let ckpt = ctx.checkpoint(PRETRAIN_CKPT)?;
    let encoder = ckpt.encoder("passage")?;
    let index = build_index(&encoder, splits.train.passages()).with_config_hash(ctx.hash.clone());
    index.save(ctx.path(INDEX_FILE))?;
    info!("indexed {} passages, checksum {}", index.len(), index.checksum().to_hex());
    Ok(())
}

fn train(ctx: &Ctx, corpus: &CorpusArg, resume: Option<&Path>) -> Result<()> {
    let splits = load_splits(&ctx.corpus_dir(corpus))?;
    let index = ctx.index()?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            ctx.same_config(path, &ckpt.config_hash)?;
            JointTrainer::resume(&ckpt, &splits.train, &index)?
        }
        None => {
            let pre = ctx.checkpoint(PRETRAIN_CKPT)?;
            let models = experiment::initial_models(&ctx.cfg, pre.encoder("question")?);
            JointTrainer::new(
                models,
                experiment::joint_settings(&ctx.cfg),
                experiment::curriculum_config(&ctx.cfg),
                &splits.train,
                &index,
            )?
        }
    };
    let total = ctx.cfg.joint.iterations as u64;
    let every = ctx.cfg.joint.checkpoint_every as u64;
    let mut log: Vec<TrainLogEntry> = Vec::new();
    while trainer.iteration() < total {
        let entry = trainer.step()?;
        if entry.iter % 50 == 0 {
            info!(
                "iter {} v={} loss {:.4} (retriever {:.4}, post-ranker {:.4}, reader {:.4})",
                entry.iter,
                entry.v,
                entry.loss_total,
                entry.loss_retriever,
                entry.loss_postranker,
                entry.loss_reader
            );
        }
        log.push(entry);
        if every > 0 && trainer.iteration() % every == 0 && trainer.iteration() < total {
            let path = ctx.path(&format!("joint-{:06}.ckpt", trainer.iteration()));
            trainer.checkpoint(&ctx.hash).save(&path)?;
        }
    }
    trainer.checkpoint(&ctx.hash).save(ctx.path(JOINT_CKPT))?;
    let log_path = ctx.path("train_log.jsonl");
    if resume.is_some() {
        // Keep the rows written before the resume point, drop any the
        // interrupted run logged after it.
        let first = log.first().map_or(u64::MAX, |e| e.iter);
        let mut earlier: Vec<TrainLogEntry> = Vec::new();
        if let Ok(text) = fs::read_to_string(&log_path) {
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let row: TrainLogEntry = serde_json::from_str(line)
                    .with_context(|| format!("parsing {}", log_path.display()))?;
                if row.iter < first {
                    earlier.push(row);
                }
            }
        }
        earlier.extend(log);
        log = earlier;
    }
    write_jsonl(&log_path, &log)?;
    info!("joint training done after {} iterations", trainer.iteration());
    Ok(())
}

fn trained_bundle(ctx: &Ctx, corpus: &Corpus) -> Result<convqa::pipeline::PipelineBundle> {
    let ckpt = ctx.checkpoint(JOINT_CKPT)?;
    let index = ctx.index()?;
    let meta_checksum = ckpt.meta.get("index_checksum").and_then(|v| v.as_str());
    if meta_checksum != Some(index.checksum().to_hex().as_str()) {
        bail!("{} was trained against a different passage index", ctx.path(JOINT_CKPT).display());
    }
    let models = JointModels::from_checkpoint(&ckpt)?;
    Ok(experiment::bundle(&ctx.cfg, models, index, corpus.shared_passages())?)
}

fn write_report(ctx: &Ctx, stem: &str, report: &MetricsReport) -> Result<()> {
    write_json(
        &ctx.path(&format!("{stem}.json")),
        &json!({ "config_hash": ctx.hash, "seed": ctx.cfg.seed, "report": report }),
    )?;
    fs::write(ctx.path(&format!("{stem}.csv")), report.to_csv())?;
    Ok(())
}

fn eval(ctx: &Ctx, corpus: &CorpusArg, split: SplitArg) -> Result<()> {
    let splits = load_splits(&ctx.corpus_dir(corpus))?;
    let part = split.pick(&splits);
    let bundle = trained_bundle(ctx, part)?;
    let evaluation = evaluate_split(&bundle, part, &experiment::eval_options(&ctx.cfg)?)?;
    write_report(ctx, &format!("report_{}", split.name()), &evaluation.report)?;
    write_jsonl(&ctx.path(&format!("outcomes_{}.jsonl", split.name())), &evaluation.outcomes)?;
    print!("{}", evaluation.report.to_csv());
    Ok(())
}

fn adhoc_conversation(question: &str, history: &[String]) -> Conversation {
    let turn = |i: usize, text: &str| Turn {
        qid: format!("ask_q{i}"),
        question_tokens: convqa::corpus::tokenize(text),
        rewrite_tokens: Vec::new(),
        answer_text_tokens: Vec::new(),
        golden_pid: String::new(),
        answer_start: 0,
        answer_end: 0,
    };
    let mut turns: Vec<Turn> = history.iter().enumerate().map(|(i, q)| turn(i, q)).collect();
    turns.push(turn(history.len(), question));
    Conversation {
        cid: "ask".into(),
        turns,
    }
}

fn ask(
    ctx: &Ctx,
    corpus: &CorpusArg,
    question: Option<String>,
    history: Vec<String>,
    stored: Option<(String, usize)>,
    split: SplitArg,
) -> Result<()> {
    let splits = load_splits(&ctx.corpus_dir(corpus))?;
    let part = split.pick(&splits);
    let (conv, turn) = match (question, stored) {
        (Some(q), _) => {
            let conv = adhoc_conversation(&q, &history);
            let last = conv.turns.len() - 1;
            (conv, last)
        }
        (None, Some((cid, turn))) => {
            let conv = part
                .conversations()
                .iter()
                .find(|c| c.cid == cid)
                .ok_or_else(|| anyhow!("no conversation {cid} in the {} split", split.name()))?
                .clone();
            if turn >= conv.turns.len() {
                bail!("conversation {cid} has {} turns", conv.turns.len());
            }
            (conv, turn)
        }
        (None, None) => bail!("give either --question or --cid with --turn"),
    };
    let bundle = trained_bundle(ctx, part)?;
    let value = match answer_question(&bundle, &conv, turn)? {
        Some(answer) => answer_json(&answer),
        None => json!({ "answer": null }),
    };
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn answer_json(a: &Answer) -> serde_json::Value {
    json!({
        "answer": a.text(),
        "pid": a.pid,
        "start": a.start,
        "end": a.end,
        "score": a.final_score,
        "breakdown": {
            "s_post": a.breakdown.s_post,
            "s_select": a.breakdown.s_select,
            "s_span": a.breakdown.s_span,
        },
    })
}

fn ablate(ctx: &Ctx, corpus: &CorpusArg, names: &[String], split: SplitArg) -> Result<()> {
    let variants: Vec<Variant> = if names.is_empty() {
        Variant::ALL.to_vec()
    } else {
        names.iter().map(|n| n.parse()).collect::<convqa::Result<_>>()?
    };
    let splits = load_splits(&ctx.corpus_dir(corpus))?;
    let part = split.pick(&splits);
    let dir = ctx.path("ablation");
    fs::create_dir_all(&dir)?;
    let mut csv = format!("variant,seed,config_hash,{REPORT_CSV_HEADER}\n");
    for variant in variants {
        let run = experiment::run_variant(&ctx.cfg, variant, &splits)?;
        run.config.save(dir.join(format!("{variant}.config.json")))?;
        let evaluation = evaluate_split(&run.bundle, part, &experiment::eval_options(&run.config)?)?;
        let hash = run.config.hash();
        info!("{variant}: F1 {:.4} recall {:.4}", evaluation.report.f1, evaluation.report.recall);
        csv.push_str(&format!(
            "{variant},{},{hash},{}\n",
            ctx.cfg.seed,
            evaluation.report.csv_row()
        ));
    }
    let path = ctx.path(&format!("ablation_{}.csv", split.name()));
    fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    print!("{csv}");
    Ok(())
}
