//! The `ibowimg` command line: pipeline subcommands over the library.
//!
//! Settings resolve as flag > `--config` TOML > built-in default. The TOML
//! file may set `seed` and `out` at top level and per-subcommand keys in a
//! table named after the subcommand, e.g. `[train] epochs = 20`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint;
use crate::corpus::{self, QaPair};
use crate::error::Error;
use crate::eval::{self, EvalItem, Metric, Track};
use crate::features::{MapStore, VectorStore};
use crate::inference::{upsample_bilinear, Engine};
use crate::model::Hyperparams;
use crate::service::{self, ServiceConfig};
use crate::train::{self, GridParam, Inputs, TrainConfig};
use crate::vocab::Vocabulary;

#[derive(Debug, Parser)]
#[command(name = "ibowimg", version, about = "Bag-of-words + image feature VQA baseline")]
struct Cli {
    /// TOML file with default settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Primary output path of the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Join questions and annotations into labelled pairs and split by image.
    Prep(PrepArgs),
    /// Build word and answer dictionaries from pairs.
    Vocab(VocabArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Search one hyperparameter over candidate values.
    Grid(GridArgs),
    /// Score a checkpoint on annotated questions and export results.
    Eval(EvalArgs),
    /// Top-k answers for one question.
    Predict(PredictArgs),
    /// Pick among candidate answers.
    Mc(McArgs),
    /// Full attribution report for one question.
    Explain(ExplainArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct PrepArgs {
    #[arg(long)]
    questions: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Fraction of images assigned to subset A.
    #[arg(long)]
    split: Option<f64>,
}

impl Default for PrepArgs {
    fn default() -> Self {
        PrepArgs {
            questions: None,
            annotations: None,
            split: Some(0.7),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct VocabArgs {
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    word_min_count: Option<usize>,
    #[arg(long)]
    answer_min_count: Option<usize>,
}

impl Default for VocabArgs {
    fn default() -> Self {
        VocabArgs {
            pairs: None,
            word_min_count: Some(1),
            answer_min_count: Some(1),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct TrainArgs {
    /// Training pairs (JSON lines).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation pairs (JSON lines).
    #[arg(long)]
    val: Option<PathBuf>,
    /// Vector feature store.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Prebuilt dictionaries; built from the training pairs when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Where to write the training report; defaults next to the checkpoint.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_embedding: Option<f64>,
    #[arg(long)]
    lr_softmax: Option<f64>,
    #[arg(long)]
    clip_embedding: Option<f64>,
    #[arg(long)]
    clip_softmax: Option<f64>,
    #[arg(long)]
    word_min_count: Option<usize>,
    #[arg(long)]
    answer_min_count: Option<usize>,
    #[arg(long)]
    evals_per_epoch: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// both, words or image.
    #[arg(long)]
    inputs: Option<String>,
}

impl Default for TrainArgs {
    fn default() -> Self {
        let c = TrainConfig::default();
        TrainArgs {
            train: None,
            val: None,
            features: None,
            vocab: None,
            report: None,
            embed_dim: Some(c.embed_dim),
            epochs: Some(c.hyper.epochs),
            batch_size: Some(c.hyper.batch_size),
            lr_embedding: Some(c.hyper.lr_embedding),
            lr_softmax: Some(c.hyper.lr_softmax),
            clip_embedding: Some(c.hyper.clip_embedding),
            clip_softmax: Some(c.hyper.clip_softmax),
            word_min_count: Some(c.word_min_count),
            answer_min_count: Some(c.answer_min_count),
            evals_per_epoch: Some(c.evals_per_epoch),
            patience: Some(c.patience),
            inputs: Some("both".into()),
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
struct GridArgs {
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainArgs,
    /// Parameter to vary, e.g. lr_softmax.
    #[arg(long)]
    param: Option<String>,
    /// Comma-separated candidate values.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Questions file; the multiple-choice file for that track.
    #[arg(long)]
    questions: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// open-ended or multiple-choice.
    #[arg(long)]
    track: Option<String>,
    /// leave-one-out or simple.
    #[arg(long)]
    metric: Option<String>,
}

impl Default for EvalArgs {
    fn default() -> Self {
        EvalArgs {
            checkpoint: None,
            features: None,
            questions: None,
            annotations: None,
            track: Some("open-ended".into()),
            metric: Some("leave-one-out".into()),
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
struct QueryArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    image_id: Option<u64>,
    #[arg(long)]
    question: Option<String>,
    /// Print JSON instead of text.
    #[arg(long)]
    #[serde(default)]
    json: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct PredictArgs {
    #[command(flatten)]
    #[serde(flatten)]
    query: QueryArgs,
    #[arg(long)]
    k: Option<usize>,
}

impl Default for PredictArgs {
    fn default() -> Self {
        PredictArgs {
            query: QueryArgs::default(),
            k: Some(3),
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
struct McArgs {
    #[command(flatten)]
    #[serde(flatten)]
    query: QueryArgs,
    /// Comma-separated candidate answers.
    #[arg(long, value_delimiter = ',')]
    choices: Option<Vec<String>>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct ExplainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    query: QueryArgs,
    #[arg(long)]
    maps: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    /// Write the top answer's CAM as a PGM image.
    #[arg(long)]
    cam: Option<PathBuf>,
    /// Upsample the CAM to this many pixels per side.
    #[arg(long)]
    cam_size: Option<usize>,
}

impl Default for ExplainArgs {
    fn default() -> Self {
        ExplainArgs {
            query: QueryArgs::default(),
            maps: None,
            k: Some(3),
            cam: None,
            cam_size: None,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct ServeArgs {
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    maps: Option<PathBuf>,
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[arg(long)]
    max_question_chars: Option<usize>,
    #[arg(long)]
    cors_origin: Option<String>,
}

impl Default for ServeArgs {
    fn default() -> Self {
        let d = ServiceConfig::default();
        ServeArgs {
            bind: Some(d.bind.to_string()),
            checkpoint: None,
            features: None,
            maps: None,
            static_dir: None,
            max_question_chars: Some(d.max_question_chars),
            cors_origin: None,
        }
    }
}

/// An error with its exit code: 1 usage, 2 data, 3 runtime.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Argument(_) => 1,
            Error::Divergence { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

struct Io<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

macro_rules! say {
    ($w:expr, $($arg:tt)*) => {
        writeln!($w, $($arg)*).map_err(|e| Failure { code: 3, message: format!("write failed: {e}") })?
    };
}

/// Runs the CLI with process stdout and stderr, returning the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

/// Runs the CLI writing results to `out` and diagnostics to `err`.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    let mut io = Io { out, err };
    match dispatch(cli, &mut io) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(io.err, "error: {}", f.message);
            f.code
        }
    }
}

/// Top-level settings from the config file plus its subcommand tables.
struct FileConfig {
    seed: Option<u64>,
    out: Option<PathBuf>,
    sections: toml::Table,
}

const SECTIONS: [&str; 9] = ["prep", "vocab", "train", "grid", "eval", "predict", "mc", "explain", "serve"];

fn read_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig {
            seed: None,
            out: None,
            sections: toml::Table::new(),
        });
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::from(Error::io(path, e)))?;
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let seed = match table.remove("seed") {
        Some(toml::Value::Integer(s)) if s >= 0 => Some(s as u64),
        Some(other) => return Err(usage(format!("config `seed` must be a non-negative integer, got {other}"))),
        None => None,
    };
    let out = match table.remove("out") {
        Some(toml::Value::String(s)) => Some(PathBuf::from(s)),
        Some(other) => return Err(usage(format!("config `out` must be a string, got {other}"))),
        None => None,
    };
    if let Some(k) = table.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
        return Err(usage(format!("unknown config key `{k}`")));
    }
    Ok(FileConfig {
        seed,
        out,
        sections: table,
    })
}

fn overlay(base: &mut Value, top: Value) {
    if let (Value::Object(b), Value::Object(t)) = (base, top) {
        for (k, v) in t {
            if !v.is_null() {
                b.insert(k, v);
            }
        }
    }
}

/// Default, then the config table, then explicitly given flags.
fn resolve<T: Serialize + DeserializeOwned + Default>(flags: &T, config: &FileConfig, section: &str) -> CliResult<T> {
    let mut merged = serde_json::to_value(T::default()).expect("args serialize");
    if let Some(table) = config.sections.get(section) {
        let v = serde_json::to_value(table).map_err(|e| usage(format!("config [{section}]: {e}")))?;
        if let (Value::Object(known), Value::Object(given)) = (&merged, &v) {
            if let Some(k) = given.keys().find(|k| !known.contains_key(*k)) {
                return Err(usage(format!("unknown key `{k}` in config [{section}]")));
            }
        }
        let t: T = serde_json::from_value(v).map_err(|e| usage(format!("config [{section}]: {e}")))?;
        overlay(&mut merged, serde_json::to_value(t).expect("args serialize"));
    }
    let mut flag_values = serde_json::to_value(flags).expect("args serialize");
    // Boolean switches only count when set.
    if let Value::Object(m) = &mut flag_values {
        m.retain(|_, v| *v != Value::Bool(false));
    }
    overlay(&mut merged, flag_values);
    serde_json::from_value(merged).map_err(|e| usage(format!("{section}: {e}")))
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> CliResult<T> {
    v.clone().ok_or_else(|| usage(format!("missing required option --{flag}")))
}

fn dispatch(cli: Cli, io: &mut Io<'_>) -> CliResult<()> {
    let config = read_config(cli.config.as_deref())?;
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    let out = cli.out.clone().or(config.out.clone());
    macro_rules! resolved {
        ($args:expr, $name:literal) => {{
            let args = resolve($args, &config, $name)?;
            say!(
                io.err,
                "resolved config: {}",
                json!({"command": $name, "seed": seed, "out": out, $name: &args})
            );
            args
        }};
    }
    match &cli.command {
        Command::Prep(a) => prep(resolved!(a, "prep"), seed, out, io),
        Command::Vocab(a) => vocab(resolved!(a, "vocab"), out, io),
        Command::Train(a) => train_cmd(resolved!(a, "train"), seed, out, io),
        Command::Grid(a) => grid(resolved!(a, "grid"), seed, out, io),
        Command::Eval(a) => eval_cmd(resolved!(a, "eval"), out, io),
        Command::Predict(a) => predict(resolved!(a, "predict"), io),
        Command::Mc(a) => mc(resolved!(a, "mc"), io),
        Command::Explain(a) => explain(resolved!(a, "explain"), io),
        Command::Serve(a) => serve(resolved!(a, "serve")),
    }
}

/// `pairs.jsonl` → `pairs.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("pairs");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn prep(a: PrepArgs, seed: u64, out: Option<PathBuf>, io: &mut Io<'_>) -> CliResult<()> {
    let out = required(&out, "out")?;
    let questions = corpus::parse_questions(&required(&a.questions, "questions")?)?;
    let annotations = corpus::parse_annotations(&required(&a.annotations, "annotations")?)?;
    let pairs = corpus::build_pairs(&questions, &annotations)?;
    let (pairs_a, pairs_b, spec) = corpus::split_by_image(&pairs, required(&a.split, "split")?, seed)?;
    corpus::write_pairs_jsonl(&out, &pairs)?;
    let (path_a, path_b, path_spec) = (sibling(&out, "a.jsonl"), sibling(&out, "b.jsonl"), sibling(&out, "split.json"));
    corpus::write_pairs_jsonl(&path_a, &pairs_a)?;
    corpus::write_pairs_jsonl(&path_b, &pairs_b)?;
    let spec_json = serde_json::to_string_pretty(&spec).expect("split spec serializes");
    fs::write(&path_spec, spec_json).map_err(|e| Failure::from(Error::io(&path_spec, e)))?;
    say!(
        io.out,
        "{} pairs: {} in {} ({} images), {} in {} ({} images); split written to {}",
        pairs.len(),
        pairs_a.len(),
        path_a.display(),
        spec.count(corpus::Split::A),
        pairs_b.len(),
        path_b.display(),
        spec.count(corpus::Split::B),
        path_spec.display()
    );
    Ok(())
}

fn vocab(a: VocabArgs, out: Option<PathBuf>, io: &mut Io<'_>) -> CliResult<()> {
    let out = required(&out, "out")?;
    let pairs = corpus::read_pairs_jsonl(&required(&a.pairs, "pairs")?)?;
    let v = Vocabulary::build(
        &pairs,
        required(&a.word_min_count, "word-min-count")?,
        required(&a.answer_min_count, "answer-min-count")?,
    )?;
    let text = serde_json::to_string_pretty(&v).expect("vocabulary serializes");
    fs::write(&out, text).map_err(|e| Failure::from(Error::io(&out, e)))?;
    say!(
        io.out,
        "{} words, {} answers written to {}",
        v.word_dict.len(),
        v.answer_dict.len(),
        out.display()
    );
    Ok(())
}

fn parse_inputs(s: &str) -> CliResult<Inputs> {
    match s {
        "both" => Ok(Inputs::Both),
        "words" | "words_only" => Ok(Inputs::WordsOnly),
        "image" | "image_only" => Ok(Inputs::ImageOnly),
        other => Err(usage(format!("--inputs must be both, words or image, got `{other}`"))),
    }
}

fn train_config(a: &TrainArgs, seed: u64) -> CliResult<TrainConfig> {
    Ok(TrainConfig {
        hyper: Hyperparams {
            lr_embedding: required(&a.lr_embedding, "lr-embedding")?,
            lr_softmax: required(&a.lr_softmax, "lr-softmax")?,
            clip_embedding: required(&a.clip_embedding, "clip-embedding")?,
            clip_softmax: required(&a.clip_softmax, "clip-softmax")?,
            epochs: required(&a.epochs, "epochs")?,
            batch_size: required(&a.batch_size, "batch-size")?,
            seed,
        },
        embed_dim: required(&a.embed_dim, "embed-dim")?,
        evals_per_epoch: required(&a.evals_per_epoch, "evals-per-epoch")?,
        patience: required(&a.patience, "patience")?,
        shuffle_seed: seed,
        word_min_count: required(&a.word_min_count, "word-min-count")?,
        answer_min_count: required(&a.answer_min_count, "answer-min-count")?,
        inputs: parse_inputs(&required(&a.inputs, "inputs")?)?,
    })
}

struct TrainData {
    train: Vec<QaPair>,
    val: Vec<QaPair>,
    store: VectorStore,
}

fn train_data(a: &TrainArgs) -> CliResult<TrainData> {
    Ok(TrainData {
        train: corpus::read_pairs_jsonl(&required(&a.train, "train")?)?,
        val: corpus::read_pairs_jsonl(&required(&a.val, "val")?)?,
        store: VectorStore::open(&required(&a.features, "features")?)?,
    })
}

fn train_cmd(a: TrainArgs, seed: u64, out: Option<PathBuf>, io: &mut Io<'_>) -> CliResult<()> {
    let out = required(&out, "out")?;
    let config = train_config(&a, seed)?;
    let data = train_data(&a)?;
    let vocab = match &a.vocab {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::from(Error::io(path, e)))?;
            serde_json::from_str(&text).map_err(|e| Failure::from(Error::from_json(&e, &text)))?
        }
        None => Vocabulary::build(&data.train, config.word_min_count, config.answer_min_count)?,
    };
    let mut log_failure = None;
    let (model, report) = train::train_with_vocabulary(&data.train, &data.val, &data.store, vocab, &config, |ev| {
        if let Err(e) = writeln!(
            io.err,
            "epoch {} batch {} loss {:.6} val_acc {:.4}",
            ev.epoch, ev.batch, ev.mean_loss, ev.val_accuracy
        ) {
            log_failure.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_failure {
        return Err(Failure {
            code: 3,
            message: format!("write failed: {e}"),
        });
    }
    checkpoint::save(&model, &out)?;
    let report_path = a.report.clone().unwrap_or_else(|| sibling(&out, "report.json"));
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&report_path, text).map_err(|e| Failure::from(Error::io(&report_path, e)))?;
    say!(
        io.out,
        "best epoch {} val_acc {:.4}; checkpoint {}; report {}",
        report.best_epoch,
        report.best_val_accuracy,
        out.display(),
        report_path.display()
    );
    Ok(())
}

fn grid(a: GridArgs, seed: u64, out: Option<PathBuf>, io: &mut Io<'_>) -> CliResult<()> {
    let param: GridParam = required(&a.param, "param")?.parse()?;
    let values = a.values.clone().unwrap_or_default();
    let base = train_config(&a.train, seed)?;
    let data = train_data(&a.train)?;
    let rows = train::grid_search(param, &values, &base, &data.train, &data.val, &data.store)?;
    say!(io.out, "{:>12}  {:>8}  {:>10}", "value", "val_acc", "best_epoch");
    for r in &rows {
        say!(io.out, "{:>12}  {:>8.4}  {:>10}", r.value, r.val_accuracy, r.best_epoch);
    }
    if let Some(path) = out {
        let text = serde_json::to_string_pretty(&rows).expect("rows serialize");
        fs::write(&path, text).map_err(|e| Failure::from(Error::io(&path, e)))?;
    }
    Ok(())
}

fn load_engine(checkpoint_path: &Option<PathBuf>, features: &Option<PathBuf>, maps: Option<&Path>) -> CliResult<Engine> {
    let model = checkpoint::load(&required(checkpoint_path, "checkpoint")?)?;
    let vectors = VectorStore::open(&required(features, "features")?)?;
    let maps = maps.map(MapStore::open).transpose()?;
    Ok(Engine::new(model, vectors, maps)?)
}

fn eval_cmd(a: EvalArgs, out: Option<PathBuf>, io: &mut Io<'_>) -> CliResult<()> {
    let track = match required(&a.track, "track")?.as_str() {
        "open-ended" | "open_ended" => Track::OpenEnded,
        "multiple-choice" | "multiple_choice" => Track::MultipleChoice,
        other => return Err(usage(format!("--track must be open-ended or multiple-choice, got `{other}`"))),
    };
    let metric = match required(&a.metric, "metric")?.as_str() {
        "leave-one-out" | "leave_one_out" => Metric::LeaveOneOut,
        "simple" => Metric::Simple,
        other => return Err(usage(format!("--metric must be leave-one-out or simple, got `{other}`"))),
    };
    let engine = load_engine(&a.checkpoint, &a.features, None)?;
    let questions_path = required(&a.questions, "questions")?;
    let annotations = corpus::parse_annotations(&required(&a.annotations, "annotations")?)?;
    let items = match track {
        Track::OpenEnded => EvalItem::join(&corpus::parse_questions(&questions_path)?, &annotations)?,
        Track::MultipleChoice => {
            EvalItem::join_multiple_choice(&corpus::parse_multiple_choice(&questions_path)?, &annotations)?
        }
    };
    let evaluation = eval::evaluate(&engine, &items, track, metric)?;
    say!(
        io.out,
        "{}",
        serde_json::to_string_pretty(&evaluation.result).expect("result serializes")
    );
    if let Some(path) = out {
        eval::export_results(&evaluation.predictions, &path)?;
        say!(io.err, "results written to {}", path.display());
    }
    Ok(())
}

fn query(q: &QueryArgs) -> CliResult<(u64, &str)> {
    let image_id = required(&q.image_id, "image-id")?;
    let question = q
        .question
        .as_deref()
        .ok_or_else(|| usage("missing required option --question"))?;
    Ok((image_id, question))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("output serializes")
}

fn predict(a: PredictArgs, io: &mut Io<'_>) -> CliResult<()> {
    let engine = load_engine(&a.query.checkpoint, &a.query.features, None)?;
    let (image_id, question) = query(&a.query)?;
    let prediction = engine.predict_topk(question, image_id, required(&a.k, "k")?)?;
    if a.query.json {
        say!(io.out, "{}", to_json(&prediction.answers));
    } else {
        for s in &prediction.answers {
            say!(io.out, "{}  p={:.4}", s.attribution_line(), s.prob);
        }
    }
    Ok(())
}

fn mc(a: McArgs, io: &mut Io<'_>) -> CliResult<()> {
    let engine = load_engine(&a.query.checkpoint, &a.query.features, None)?;
    let (image_id, question) = query(&a.query)?;
    let choices = required(&a.choices, "choices")?;
    let result = engine.predict_multiple_choice(question, image_id, &choices)?;
    if a.query.json {
        say!(io.out, "{}", to_json(&result));
    } else {
        say!(io.out, "chosen: {}", result.chosen);
        for c in &result.choices {
            let note = if c.scored { "" } else { "  (not an answer class)" };
            say!(io.out, "  {:<20} {:.4}{note}", c.choice, c.prob);
        }
    }
    Ok(())
}

fn explain(a: ExplainArgs, io: &mut Io<'_>) -> CliResult<()> {
    if a.cam.is_some() && a.maps.is_none() {
        return Err(Failure {
            code: 2,
            message: "--cam needs a convolutional map store; pass --maps".into(),
        });
    }
    let engine = load_engine(&a.query.checkpoint, &a.query.features, a.maps.as_deref())?;
    let (image_id, question) = query(&a.query)?;
    let ex = engine.explain(question, image_id, required(&a.k, "k")?)?;
    if let (Some(path), Some(top)) = (&a.cam, ex.answers.first()) {
        let mut grid = engine.cam(image_id, top.class)?.expect("map store is loaded");
        if let Some(side) = a.cam_size {
            grid = upsample_bilinear(&grid, side, side)?;
        }
        fs::write(path, grid.to_pgm()).map_err(|e| Failure::from(Error::io(path, e)))?;
        say!(io.err, "CAM for `{}` written to {}", top.answer, path.display());
    }
    if a.query.json {
        say!(io.out, "{}", to_json(&ex));
        return Ok(());
    }
    say!(io.out, "question: {}", ex.question);
    say!(io.out, "image: {}", ex.image_id);
    for flag in &ex.flags {
        say!(io.out, "note: {flag}");
    }
    say!(io.out, "answers:");
    for s in &ex.answers {
        say!(io.out, "  {}", s.attribution_line());
    }
    say!(io.out, "words only:");
    for r in &ex.words_only {
        say!(io.out, "  {} ({:.2})", r.answer, r.score);
    }
    say!(io.out, "image only:");
    for r in &ex.image_only {
        say!(io.out, "  {} ({:.2})", r.answer, r.score);
    }
    if let Some(top) = ex.answers.first() {
        say!(io.out, "word importance for `{}`:", top.answer);
        for t in &ex.word_importance {
            let oov = if t.oov { "  (not in vocabulary)" } else { "" };
            say!(io.out, "  {:<16} {:>8.4}{oov}", t.token, t.importance);
        }
    }
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult<()> {
    let bind = required(&a.bind, "bind")?;
    let config = ServiceConfig {
        bind: bind
            .parse()
            .map_err(|_| usage(format!("--bind must be host:port, got `{bind}`")))?,
        checkpoint: required(&a.checkpoint, "checkpoint")?,
        vectors: required(&a.features, "features")?,
        maps: a.maps.clone(),
        static_dir: a.static_dir.clone(),
        max_question_chars: required(&a.max_question_chars, "max-question-chars")?,
        cors_origin: a.cors_origin.clone(),
    };
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .try_init();
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure {
        code: 3,
        message: format!("cannot start runtime: {e}"),
    })?;
    runtime.block_on(service::serve(config, async {
        let _ = tokio::signal::ctrl_c().await;
    }))?;
    Ok(())
}
