//! `mixsp` command-line tool.
//!
//! Exit codes: 0 success, 2 usage, 3 input/output, 4 runtime or numeric.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mixsp::analysis::{
    alignment, cosine_samples, encoder_cosine_samples, kde_overlap, ngram_jaccard, uniformity,
};
use mixsp::data::{
    split, synth_corpus, synth_metadata, Class, Corpus, SentencePair, SynthConfig, Vocab,
};
use mixsp::encoder::Encoder;
use mixsp::metrics::{load_queries, map, EvalReport};
use mixsp::mixsp::{HeadConfig, Model, Variant};
use mixsp::trainer::{
    evaluate, init_model, init_toy_model, load_checkpoint, save_checkpoint, train, TrainMode,
};
use serde::Serialize;
use serde_json::json;

use config::{EncoderChoice, RunConfig};

const TRAIN_FILE: &str = "train.tsv";
const DEV_FILE: &str = "dev.tsv";
const TEST_FILE: &str = "test.tsv";
const VOCAB_FILE: &str = "vocab.txt";
const META_FILE: &str = "synth.meta";

/// A command failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: 4,
            message: message.into(),
        }
    }

    /// Errors raised while reading inputs or settings.
    pub fn from_load(e: mixsp::Error) -> Self {
        match e {
            mixsp::Error::Argument(_) | mixsp::Error::Config(_) => Failure::usage(e.to_string()),
            other => Failure::io(other.to_string()),
        }
    }

    /// Errors raised while computing.
    fn from_run(e: mixsp::Error) -> Self {
        match e {
            mixsp::Error::Argument(_) | mixsp::Error::Config(_) => Failure::usage(e.to_string()),
            mixsp::Error::Io { .. } | mixsp::Error::Json(_) => Failure::io(e.to_string()),
            other => Failure::runtime(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser)]
#[command(
    name = "mixsp",
    version,
    about = "Classify-then-rank sentence-pair similarity toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with train/dev/test splits.
    Synth(SynthArgs),
    /// Train one model per seed and report mean and sample deviation.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a TSV file.
    Eval(EvalArgs),
    /// Similarity-distribution diagnostics: overlap, alignment, uniformity.
    Analyze(AnalyzeArgs),
    /// Word n-gram Jaccard similarity between two corpora.
    Leakage(LeakageArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pairs: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 512)]
    vocab: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Standard deviation of the score noise.
    #[arg(long, default_value_t = 0.15)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    EndToEnd,
    TwoStage,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Directory holding train.tsv, dev.tsv, vocab.txt and optionally test.tsv.
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Head preset. Given on the command line it replaces any head in the config file.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    encoder: Option<EncoderChoice>,
    #[arg(long)]
    mode: Option<ModeArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Toy encoder width; defaults to the corpus metadata, then 16.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Vocabulary file; defaults to vocab.txt next to the data.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// JSONL reranking queries for MAP.
    #[arg(long)]
    rerank: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(clap::Args)]
struct AnalyzeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Use encoder outputs instead of the head's projected vectors.
    #[arg(long)]
    encoder_space: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct LeakageArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "4,5,6")]
    ngrams: Vec<usize>,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: mixsp::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Leakage(a) => cmd_leakage(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Failure::io(format!("creating {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).map_err(|e| Failure::io(format!("writing {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(e.to_string()))?;
    text.push('\n');
    write_file(path, text)
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let cfg = SynthConfig {
        n_pairs: a.pairs,
        dim: a.dim,
        vocab_size: a.vocab,
        seed: a.seed,
        noise: a.noise,
        ..SynthConfig::default()
    };
    let (corpus, _) = synth_corpus(&cfg).map_err(Failure::from_run)?;
    let parts = split(&corpus, &[0.8, 0.1, 0.1], cfg.seed).map_err(Failure::from_run)?;
    create_dir(&a.out)?;
    for (part, file) in parts.iter().zip([TRAIN_FILE, DEV_FILE, TEST_FILE]) {
        part.save_tsv(a.out.join(file))
            .map_err(Failure::from_load)?;
    }
    corpus
        .vocab
        .save(a.out.join(VOCAB_FILE))
        .map_err(Failure::from_load)?;
    write_file(&a.out.join(META_FILE), synth_metadata(&cfg))?;
    println!(
        "wrote {} pairs to {} (train {}, dev {}, test {})",
        corpus.len(),
        a.out.display(),
        parts[0].len(),
        parts[1].len(),
        parts[2].len()
    );
    Ok(())
}

fn load_corpus(path: &Path, vocab: &Vocab, head: &HeadConfig) -> Result<Corpus, Failure> {
    Corpus::load_tsv(path, Some(vocab.clone()), &head.bin_scheme).map_err(Failure::from_load)
}

fn load_vocab(path: &Path) -> Result<Vocab, Failure> {
    Vocab::load(path).map_err(Failure::from_load)
}

fn read_meta(dir: &Path) -> Result<Option<SynthConfig>, Failure> {
    let path = dir.join(META_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)
        .map_err(|e| Failure::io(format!("reading {}: {e}", path.display())))?;
    SynthConfig::from_metadata(&text)
        .map(Some)
        .map_err(|e| Failure::io(e.to_string()))
}

#[derive(Serialize)]
struct Aggregate {
    mean: f64,
    /// Sample standard deviation; absent with fewer than two runs.
    std: Option<f64>,
    n: usize,
}

fn aggregate(values: &[f64]) -> Option<Aggregate> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    Some(Aggregate { mean, std, n })
}

fn report_metrics(r: &EvalReport) -> [(&'static str, Option<f64>); 8] {
    [
        ("spearman_overall", r.spearman_overall),
        ("spearman_upper", r.spearman_upper),
        ("spearman_lower", r.spearman_lower),
        ("pearson", r.pearson),
        ("router_accuracy", r.router_accuracy),
        ("auc", r.auc),
        ("overlap", r.overlap),
        ("alignment_z", r.alignment_z),
    ]
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(d) = a.data {
        cfg.data = Some(d);
    }
    if let Some(o) = a.out {
        cfg.out = Some(o);
    }
    if let Some(s) = a.seeds {
        cfg.seeds = s;
    }
    if let Some(v) = a.variant {
        cfg.variant = v;
        cfg.head = None;
    }
    if let Some(e) = a.encoder {
        cfg.encoder = e;
    }
    if let Some(m) = a.mode {
        cfg.train.mode = match m {
            ModeArg::EndToEnd => TrainMode::EndToEnd,
            ModeArg::TwoStage => TrainMode::TwoStage,
        };
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    let cfg = cfg.resolve()?;
    let head = cfg.head();
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| Failure::usage("--data is required"))?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Failure::usage("--out is required"))?;

    let vocab = load_vocab(&data.join(VOCAB_FILE))?;
    let train_set = load_corpus(&data.join(TRAIN_FILE), &vocab, &head)?;
    let dev_path = data.join(DEV_FILE);
    let dev_set = if dev_path.exists() {
        Some(load_corpus(&dev_path, &vocab, &head)?)
    } else {
        None
    };
    let test_path = data.join(TEST_FILE);
    let test_set = if test_path.exists() {
        Some(load_corpus(&test_path, &vocab, &head)?)
    } else {
        None
    };
    let dev_pairs: &[SentencePair] = dev_set.as_ref().map_or(&[], |c| &c.pairs);
    let (eval_name, eval_pairs) = match (&test_set, &dev_set) {
        (Some(t), _) => ("test", &t.pairs),
        (None, Some(d)) => ("dev", &d.pairs),
        (None, None) => ("train", &train_set.pairs),
    };

    let meta = read_meta(&data)?;
    let dim = a.dim.or(meta.as_ref().map(|m| m.dim)).unwrap_or(16);
    let geometry = match cfg.encoder {
        EncoderChoice::Synthetic => {
            let gen = meta.ok_or_else(|| {
                Failure::usage(format!(
                    "the synthetic encoder needs {META_FILE} in the data directory"
                ))
            })?;
            Some(synth_corpus(&gen).map_err(Failure::from_run)?.1)
        }
        _ => None,
    };

    create_dir(&out)?;
    let mut runs = Vec::new();
    let mut per_metric: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for &seed in &cfg.seeds {
        let model = match &geometry {
            Some(g) => init_model(head.clone(), Encoder::Synthetic(g.clone()), seed),
            None => init_toy_model(
                head.clone(),
                vocab.len(),
                dim,
                cfg.encoder == EncoderChoice::Toy,
                seed,
            ),
        }
        .map_err(Failure::from_run)?;
        let tc = mixsp::trainer::TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let outcome = train(model, &train_set.pairs, dev_pairs, &tc).map_err(Failure::from_run)?;
        let ckpt = out.join(format!("checkpoint-seed{seed}.json"));
        save_checkpoint(&outcome.model, Some(&tc), &outcome.history, &ckpt)
            .map_err(Failure::from_run)?;
        let report = evaluate(&outcome.model, eval_pairs).map_err(Failure::from_run)?;
        for (name, v) in report_metrics(&report) {
            if let Some(v) = v {
                per_metric.entry(name).or_default().push(v);
            }
        }
        println!(
            "seed {seed}: {eval_name} spearman {} router acc {} overlap {}",
            show(report.spearman_overall),
            show(report.router_accuracy),
            show(report.overlap)
        );
        runs.push(json!({
            "seed": seed,
            "checkpoint": ckpt,
            "best_epoch": outcome.history.best,
            "history": outcome.history,
            "report": report,
        }));
    }
    let summary: BTreeMap<&str, Aggregate> = per_metric
        .iter()
        .filter_map(|(k, v)| aggregate(v).map(|a| (*k, a)))
        .collect();
    for (name, agg) in &summary {
        match agg.std {
            Some(s) => println!("{name}: {:.4} ± {:.4} (n = {})", agg.mean, s, agg.n),
            None => println!("{name}: {:.4} (n = {})", agg.mean, agg.n),
        }
    }
    write_json(
        &out.join("report.json"),
        &json!({
            "run_config": cfg,
            "dim": dim,
            "eval_split": eval_name,
            "runs": runs,
            "aggregate": summary,
        }),
    )
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Load a checkpoint and a TSV file, checking the vocabulary fits the model.
fn load_model_and_data(
    model: &Path,
    data: &Path,
    vocab: Option<&Path>,
) -> Result<(Model, Corpus, PathBuf), Failure> {
    let ckpt = load_checkpoint(model).map_err(Failure::from_load)?;
    let vocab_path = vocab.map(Path::to_path_buf).unwrap_or_else(|| {
        data.parent()
            .unwrap_or_else(|| Path::new("."))
            .join(VOCAB_FILE)
    });
    let vocab = load_vocab(&vocab_path)?;
    if let Encoder::Toy(t) = &ckpt.model.encoder {
        if vocab.len() > t.vocab_size() {
            return Err(Failure::io(
                mixsp::Error::Dimension {
                    what: "vocabulary size".into(),
                    expected: t.vocab_size(),
                    found: vocab.len(),
                }
                .to_string(),
            ));
        }
    }
    let corpus = load_corpus(data, &vocab, &ckpt.model.config)?;
    Ok((ckpt.model, corpus, vocab_path))
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let (model, corpus, vocab_path) = load_model_and_data(&a.model, &a.data, a.vocab.as_deref())?;
    let mut report = evaluate(&model, &corpus.pairs).map_err(Failure::from_run)?;
    if let Some(path) = &a.rerank {
        let queries = load_queries(path).map_err(Failure::from_load)?;
        match map(&queries) {
            Ok(m) => report.map = Some(m.map),
            Err(e) => {
                report.errors.insert("map".into(), e.to_string());
            }
        }
    }
    println!(
        "{} pairs: spearman {} pearson {} router acc {} auc {} overlap {}",
        report.n_pairs,
        show(report.spearman_overall),
        show(report.pearson),
        show(report.router_accuracy),
        show(report.auc),
        show(report.overlap)
    );
    for (k, v) in &report.errors {
        eprintln!("note: {k}: {v}");
    }
    write_json(
        &a.report,
        &json!({
            "run_config": {
                "model": a.model,
                "data": a.data,
                "vocab": vocab_path,
                "rerank": a.rerank,
                "head": model.config,
            },
            "report": report,
        }),
    )
}

fn cmd_analyze(a: AnalyzeArgs) -> CmdResult {
    let (model, corpus, vocab_path) = load_model_and_data(&a.model, &a.data, a.vocab.as_deref())?;
    for class in [Class::Upper, Class::Lower] {
        if corpus.count(class) == 0 {
            return Err(Failure::runtime(format!(
                "{} contains no {class} pairs",
                a.data.display()
            )));
        }
    }
    let samples = if a.encoder_space {
        encoder_cosine_samples(&model.encoder, &corpus.pairs)
    } else {
        cosine_samples(&model, &corpus.pairs)
    }
    .map_err(Failure::from_run)?;
    let (overlap, grid) = kde_overlap(&samples.samples).map_err(Failure::from_run)?;

    let mut vectors = Vec::with_capacity(corpus.len());
    for p in &corpus.pairs {
        let (v1, v2) = if a.encoder_space {
            let e = model.encode(p).map_err(Failure::from_run)?;
            (e.h_x1, e.h_x2)
        } else {
            let pr = model.predict(p).map_err(Failure::from_run)?.projected;
            (pr.z_x1, pr.z_x2)
        };
        vectors.push((v1, v2, p.class));
    }
    let usable = |v: &[f64]| v.iter().any(|x| *x != 0.0);
    let kept: Vec<_> = vectors
        .into_iter()
        .filter(|(a, b, _)| usable(a) && usable(b))
        .collect();
    let positives: Vec<(Vec<f64>, Vec<f64>)> = kept
        .iter()
        .filter(|(_, _, c)| *c == Class::Upper)
        .map(|(a, b, _)| (a.clone(), b.clone()))
        .collect();
    let all: Vec<Vec<f64>> = kept
        .iter()
        .flat_map(|(a, b, _)| [a.clone(), b.clone()])
        .collect();
    let mut errors = BTreeMap::new();
    let mut keep = |name: &str, r: mixsp::Result<f64>| match r {
        Ok(v) => Some(v),
        Err(e) => {
            errors.insert(name.to_string(), e.to_string());
            None
        }
    };
    let align = keep("alignment", alignment(&positives));
    let uniform = keep("uniformity", uniformity(&all));

    create_dir(&a.out)?;
    write_file(&a.out.join("density.csv"), grid.to_csv())?;
    let space = if a.encoder_space { "h_x" } else { "z" };
    println!(
        "overlap {overlap:.4} ({:.2}%) over {} pairs, alignment_{space} {}, uniformity_{space} {}",
        overlap * 100.0,
        samples.samples.len(),
        show(align),
        show(uniform)
    );
    write_json(
        &a.out.join("report.json"),
        &json!({
            "run_config": {
                "model": a.model,
                "data": a.data,
                "vocab": vocab_path,
                "encoder_space": a.encoder_space,
                "head": model.config,
            },
            "space": space,
            "n_pairs": corpus.len(),
            "n_upper": corpus.count(Class::Upper),
            "n_lower": corpus.count(Class::Lower),
            "skipped_pairs": samples.skipped,
            "overlap": overlap,
            "overlap_percent": overlap * 100.0,
            "bandwidth_upper": grid.h_upper,
            "bandwidth_lower": grid.h_lower,
            "grid_points": grid.x.len(),
            "alignment": align,
            "uniformity": uniform,
            "errors": errors,
        }),
    )
}

/// Sentences of a text file. Lines with at least three tab-separated fields
/// are pair records and contribute their first two fields; other non-blank
/// lines are one sentence each.
fn read_sentences(path: &Path) -> Result<Vec<String>, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::io(format!("reading {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() >= 3 {
            out.push(fields[0].to_string());
            out.push(fields[1].to_string());
        } else {
            out.push(line.to_string());
        }
    }
    Ok(out)
}

fn cmd_leakage(a: LeakageArgs) -> CmdResult {
    let train_s = read_sentences(&a.train)?;
    let test_s = read_sentences(&a.test)?;
    let mut results = Vec::new();
    for &n in &a.ngrams {
        let j = ngram_jaccard(&train_s, &test_s, n).map_err(Failure::from_run)?;
        if j.both_empty {
            eprintln!("warning: no {n}-grams in either corpus; reporting 0");
        }
        results.push(j);
    }
    if a.json {
        let body = json!({
            "run_config": { "train": a.train, "test": a.test, "ngrams": a.ngrams },
            "results": results.iter().map(|j| json!({"n": j.n, "jaccard": j.value, "both_empty": j.both_empty})).collect::<Vec<_>>(),
        });
        println!(
            "{}",
            serde_json::to_string_pretty(&body).map_err(|e| Failure::runtime(e.to_string()))?
        );
    } else {
        for j in &results {
            println!("{}-gram jaccard {:.6}", j.n, j.value);
        }
    }
    Ok(())
}
