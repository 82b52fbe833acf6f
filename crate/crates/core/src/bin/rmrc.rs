use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rmrc::answer_extractor::MatchScope;
use rmrc::corpus::{generate_corpus, read_corpus, write_corpus, GeneratorConfig, SpanStyle};
use rmrc::mrc::{Decoding, MrcParams};
use rmrc::nn::Checkpoint;
use rmrc::trainer::{
    ablate, adapt_split, evaluate, gold_examples, pretrain_mrc, selector_checkpoint, selector_from_checkpoint,
    sweep, write_metrics_log, FeatureCache, SweepParam, TargetSplit, TrainConfig, Variant,
};
use rmrc::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "rmrc", version, about = "Reading comprehension adaptation from dialogue-derived QA pairs")]
struct Cli {
    /// Seed for every random choice in the run.
    #[arg(long, global = true, env = "RMRC_SEED", default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with optional dialogue noise.
    GenCorpus(GenArgs),
    /// Train the reader on the ground-truth pairs of a source corpus.
    Pretrain(PretrainArgs),
    /// Adapt a pre-trained reader to a target corpus.
    Adapt(AdaptArgs),
    /// Score a reader checkpoint on the ground-truth pairs of a corpus.
    Eval(EvalArgs),
    /// Run every ablation variant over a seed list.
    Ablate(AblateArgs),
    /// Adapt once per value of one hyperparameter.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StyleArg {
    Bare,
    Marked,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 60)]
    docs: usize,
    #[arg(long, default_value_t = 4)]
    sentences_min: usize,
    #[arg(long, default_value_t = 6)]
    sentences_max: usize,
    #[arg(long, default_value_t = 4000)]
    vocab: usize,
    #[arg(long, default_value_t = 3)]
    qa_min: usize,
    #[arg(long, default_value_t = 3)]
    qa_max: usize,
    /// Expected fraction of inserted irrelevant chats.
    #[arg(long, default_value_t = 0.0)]
    irrelevant_rate: f64,
    /// Share of irrelevant chats spoken by the questioner.
    #[arg(long, default_value_t = 0.5)]
    questioner_share: f64,
    /// Move every question up to this many positions earlier.
    #[arg(long)]
    shuffle_max_shift: Option<usize>,
    #[arg(long, value_enum, default_value_t = StyleArg::Marked)]
    span_style: StyleArg,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Reference hyperparameters, including the small learning rates.
    Default,
    /// Step sizes and schedule for the small synthetic benchmark.
    Benchmark,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScopeArg {
    Associated,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DecodingArg {
    Constrained,
    Independent,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// Longest n-gram and longest decoded span.
    #[arg(long)]
    max_n: Option<usize>,
    /// Answer filtering threshold; use -inf to keep every match.
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<f64>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    kappa: Option<usize>,
    /// Reward baseline.
    #[arg(long, allow_hyphen_values = true)]
    baseline: Option<f64>,
    #[arg(long)]
    running_baseline: bool,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    pretrain_lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    mrc_steps: Option<usize>,
    #[arg(long)]
    qs_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    adapt_lr: Option<f64>,
    #[arg(long)]
    selector_lr: Option<f64>,
    #[arg(long)]
    selector_frozen: bool,
    /// Ablation variant, e.g. no_answer_filtering.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long, value_enum)]
    scope: Option<ScopeArg>,
    #[arg(long)]
    exploration: Option<f64>,
    #[arg(long)]
    eval_fraction: Option<f64>,
    #[arg(long)]
    confidence_threshold: Option<f64>,
    /// Build pseudo pairs once instead of every epoch.
    #[arg(long)]
    single_construction: bool,
    #[arg(long, value_enum)]
    decoding: Option<DecodingArg>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    hash_seed: Option<u64>,
    #[arg(long)]
    hidden: Option<usize>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| {
        let names: Vec<String> = Variant::ALL
            .iter()
            .map(|v| serde_json::to_value(v).unwrap().as_str().unwrap().to_owned())
            .collect();
        format!("unknown variant {s:?}; expected one of {}", names.join(", "))
    })
}

impl TrainArgs {
    fn config(&self, seed: u64) -> Result<TrainConfig> {
        let mut c = match self.preset {
            Preset::Default => TrainConfig::default(),
            Preset::Benchmark => TrainConfig::benchmark(),
        };
        c.seed = seed;
        macro_rules! set {
            ($($field:ident <- $arg:ident),* $(,)?) => {
                $(if let Some(v) = self.$arg { c.$field = v; })*
            };
        }
        set!(
            max_n <- max_n,
            gamma <- gamma,
            tau <- tau,
            kappa <- kappa,
            baseline <- baseline,
            pretrain_epochs <- pretrain_epochs,
            pretrain_lr <- pretrain_lr,
            epochs <- epochs,
            mrc_steps_per_epoch <- mrc_steps,
            qs_steps_per_epoch <- qs_steps,
            batch_size <- batch_size,
            adapt_lr <- adapt_lr,
            selector_lr <- selector_lr,
            variant <- variant,
            exploration <- exploration,
            eval_fraction <- eval_fraction,
            confidence_threshold <- confidence_threshold,
            hidden <- hidden,
        );
        if let Some(d) = self.dim {
            c.enc.dim = d;
        }
        if let Some(h) = self.hash_seed {
            c.enc.hash_seed = h;
        }
        if let Some(s) = self.scope {
            c.scope = match s {
                ScopeArg::Associated => MatchScope::AssociatedDocument,
                ScopeArg::All => MatchScope::AllDocuments,
            };
        }
        if let Some(d) = self.decoding {
            c.decoding = match d {
                DecodingArg::Constrained => Decoding::Constrained,
                DecodingArg::Independent => Decoding::Independent,
            };
        }
        c.running_baseline |= self.running_baseline;
        c.selector_frozen |= self.selector_frozen;
        c.reconstruct_each_epoch &= !self.single_construction;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[arg(long)]
    target: PathBuf,
    /// Reader checkpoint from `pretrain`.
    #[arg(long)]
    mrc: PathBuf,
    /// Selector checkpoint; a fresh seeded selector when omitted.
    #[arg(long)]
    selector: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SplitArg {
    /// Held-out documents under the seed and eval fraction.
    Eval,
    Train,
    All,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    mrc: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Eval)]
    split: SplitArg,
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Comma-separated seeds; defaults to three seeds starting at --seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// One of gamma, kappa, baseline, tau.
    #[arg(long, value_parser = parse_sweep_param)]
    param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
    values: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

fn parse_sweep_param(s: &str) -> std::result::Result<SweepParam, String> {
    SweepParam::parse(s).ok_or_else(|| format!("unknown sweep parameter {s:?}; expected gamma, kappa, baseline or tau"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a, cli.seed),
        Command::Pretrain(a) => pretrain(a, cli.seed),
        Command::Adapt(a) => adapt_cmd(a, cli.seed),
        Command::Eval(a) => eval_cmd(a, cli.seed),
        Command::Ablate(a) => ablate_cmd(a, cli.seed),
        Command::Sweep(a) => sweep_cmd(a, cli.seed),
    }
}

fn gen_corpus(a: GenArgs, seed: u64) -> Result<()> {
    let cfg = GeneratorConfig {
        num_documents: a.docs,
        sentences_per_document: (a.sentences_min, a.sentences_max),
        vocabulary_size: a.vocab,
        qa_pairs_per_dialogue: (a.qa_min, a.qa_max),
        irrelevant_chat_rate: a.irrelevant_rate,
        irrelevant_questioner_share: a.questioner_share,
        shuffle: a.shuffle_max_shift.is_some(),
        shuffle_max_shift: a.shuffle_max_shift.unwrap_or(5),
        span_style: match a.span_style {
            StyleArg::Bare => SpanStyle::Bare,
            StyleArg::Marked => SpanStyle::Marked,
        },
        seed,
    };
    let corpus = generate_corpus(&cfg)?;
    write_corpus(&corpus, &a.output)?;
    println!(
        "documents {} dialogues {} chats {} truth_pairs {}",
        corpus.documents.len(),
        corpus.dialogues.len(),
        corpus.chat_count(),
        corpus.truth_pairs.len()
    );
    Ok(())
}

struct OutDir {
    root: PathBuf,
}

impl OutDir {
    fn create(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "metrics"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(OutDir { root: root.to_owned() })
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    fn write(&self, rel: &str, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
        let path = self.root.join(rel);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))
    }

    fn reports<T: Serialize>(&self, text: &str, records: &[T]) -> Result<()> {
        self.write("report.txt", |w| w.write_all(text.as_bytes()))?;
        self.write("report.jsonl", |w| {
            for r in records {
                serde_json::to_writer(&mut *w, r)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        })
    }
}

fn load_mrc(path: &Path, config: &TrainConfig) -> Result<MrcParams> {
    let params = MrcParams::from_checkpoint(&Checkpoint::read(path)?)?;
    if params.enc != config.enc {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with embedding dim {} and hash seed {}; pass matching --dim/--hash-seed",
            path.display(),
            params.enc.dim,
            params.enc.hash_seed
        )));
    }
    Ok(params)
}

fn pretrain(a: PretrainArgs, seed: u64) -> Result<()> {
    let config = a.train.config(seed)?;
    let source = read_corpus(&a.source)?;
    let out = OutDir::create(&a.out)?;
    let outcome = pretrain_mrc(&source, &config)?;
    outcome.params.to_checkpoint().write(out.checkpoint("mrc.ckpt"))?;
    out.write("metrics/pretrain.jsonl", |w| {
        for e in &outcome.epochs {
            serde_json::to_writer(&mut *w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    let mut text = format!("{:>5} {:>10} {:>7} {:>7}\n", "epoch", "loss", "EM", "F1");
    for e in &outcome.epochs {
        text.push_str(&format!("{:>5} {:>10.4} {:>7.2} {:>7.2}\n", e.epoch, e.loss, 100.0 * e.em, 100.0 * e.f1));
    }
    out.reports(&text, &outcome.epochs)?;
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct AdaptReport<'a> {
    config: &'a TrainConfig,
    before_em: f64,
    before_f1: f64,
    recall_before: Option<f64>,
    final_em: f64,
    final_f1: f64,
    final_recall: Option<f64>,
    wall_clock_secs: f64,
}

fn adapt_cmd(a: AdaptArgs, seed: u64) -> Result<()> {
    let config = a.train.config(seed)?;
    let target = read_corpus(&a.target)?;
    let mrc = load_mrc(&a.mrc, &config)?;
    let selector = match &a.selector {
        Some(p) => {
            let (s, enc) = selector_from_checkpoint(&Checkpoint::read(p)?)?;
            if enc != config.enc {
                return Err(Error::Config("selector checkpoint embedding settings differ from the run".into()));
            }
            s
        }
        None => config.init_selector(),
    };
    let out = OutDir::create(&a.out)?;
    let split = TargetSplit::new(&target, &config)?;
    let outcome = adapt_split(&mrc, &selector, &split, &config, Some(&out.root.join("checkpoints")))?;
    outcome.mrc.to_checkpoint().write(out.checkpoint("mrc.ckpt"))?;
    selector_checkpoint(&outcome.selector, &config.enc).write(out.checkpoint("selector.ckpt"))?;
    let m = &outcome.metrics;
    out.write("metrics/adapt.jsonl", |w| write_metrics_log(&m.epochs, w))?;
    let report = AdaptReport {
        config: &config,
        before_em: m.before.em,
        before_f1: m.before.f1,
        recall_before: m.recall_before,
        final_em: m.final_em(),
        final_f1: m.final_f1(),
        final_recall: m.final_recall(),
        wall_clock_secs: m.wall_clock_secs,
    };
    let fmt_recall = |r: Option<f64>| r.map_or("-".to_owned(), |r| format!("{:.2}", 100.0 * r));
    let mut text = format!("{:>5} {:>7} {:>7} {:>7} {:>7}\n", "epoch", "EM", "F1", "recall", "pairs");
    text.push_str(&format!(
        "{:>5} {:>7.2} {:>7.2} {:>7}\n",
        "init",
        100.0 * m.before.em,
        100.0 * m.before.f1,
        fmt_recall(m.recall_before)
    ));
    for e in &m.epochs {
        text.push_str(&format!(
            "{:>5} {:>7.2} {:>7.2} {:>7} {:>7}\n",
            e.epoch,
            100.0 * e.em,
            100.0 * e.f1,
            fmt_recall(e.selector_recall),
            e.pairs
        ));
    }
    text.push_str(&format!("wall clock {:.1}s\n", m.wall_clock_secs));
    out.reports(&text, &[report])?;
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    split: SplitArg,
    em: f64,
    f1: f64,
    count: usize,
}

fn eval_cmd(a: EvalArgs, seed: u64) -> Result<()> {
    let config = a.train.config(seed)?;
    let mrc = load_mrc(&a.mrc, &config)?;
    let corpus = read_corpus(&a.corpus)?;
    let (train, held) = corpus.split_by_document(config.eval_fraction, config.seed);
    let chosen = match a.split {
        SplitArg::Eval => held,
        SplitArg::Train => train,
        SplitArg::All => corpus,
    };
    let examples = gold_examples(&chosen)?;
    let cache = FeatureCache::new(&chosen, &config.enc)?;
    let e = evaluate(&mrc, &chosen, &cache, &examples, config.max_n, config.decoding)?;
    let report = EvalReport {
        split: a.split,
        em: e.em,
        f1: e.f1,
        count: e.count,
    };
    let line = serde_json::to_string(&report).map_err(|e| Error::Integrity(e.to_string()))?;
    println!("{line}");
    if let Some(dir) = &a.out {
        let out = OutDir::create(dir)?;
        out.write("metrics/eval.jsonl", |w| writeln!(w, "{line}"))?;
        let text = format!("EM {:.2}  F1 {:.2}  examples {}\n", 100.0 * e.em, 100.0 * e.f1, e.count);
        out.reports(&text, &[report])?;
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs, seed: u64) -> Result<()> {
    let config = a.train.config(seed)?;
    let source = read_corpus(&a.source)?;
    let target = read_corpus(&a.target)?;
    let seeds = if a.seeds.is_empty() {
        vec![seed, seed + 1, seed + 2]
    } else {
        a.seeds.clone()
    };
    let out = OutDir::create(&a.out)?;
    let report = ablate(&config, &source, &target, &seeds)?;
    for run in &report.runs {
        for v in &run.runs {
            let name = format!(
                "metrics/{}-seed{}.jsonl",
                serde_json::to_value(v.variant).unwrap().as_str().unwrap(),
                run.seed
            );
            out.write(&name, |w| write_metrics_log(&v.metrics.epochs, w))?;
        }
    }
    let text = report.to_text();
    out.reports(&text, &report.rows)?;
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    param: SweepParam,
    value: f64,
    em: f64,
    f1: f64,
    selector_recall: Option<f64>,
}

fn sweep_cmd(a: SweepArgs, seed: u64) -> Result<()> {
    let config = a.train.config(seed)?;
    let source = read_corpus(&a.source)?;
    let target = read_corpus(&a.target)?;
    let out = OutDir::create(&a.out)?;
    let pre = pretrain_mrc(&source, &config)?;
    pre.params.to_checkpoint().write(out.checkpoint("mrc-pretrained.ckpt"))?;
    let points = sweep(&config, &pre.params, &target, a.param, &a.values, a.workers)?;
    let pname = serde_json::to_value(a.param).unwrap().as_str().unwrap().to_owned();
    let mut rows = Vec::with_capacity(points.len());
    let mut text = format!("{:>10} {:>7} {:>7}\n", pname, "EM", "F1");
    for p in &points {
        out.write(&format!("metrics/sweep-{pname}-{}.jsonl", p.value), |w| {
            write_metrics_log(&p.metrics.epochs, w)
        })?;
        text.push_str(&format!(
            "{:>10} {:>7.2} {:>7.2}\n",
            p.value,
            100.0 * p.metrics.final_em(),
            100.0 * p.metrics.final_f1()
        ));
        rows.push(SweepRow {
            param: a.param,
            value: p.value,
            em: p.metrics.final_em(),
            f1: p.metrics.final_f1(),
            selector_recall: p.metrics.final_recall(),
        });
    }
    out.reports(&text, &rows)?;
    print!("{text}");
    Ok(())
}
