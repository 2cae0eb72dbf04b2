//! Command-line harness. Argument types live here so the binary stays a
//! thin wrapper and tests can drive commands in-process.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, SeededRng};
use crate::metrics::{self, embedding_entropy, log2_embedding_ppl, mc_accuracy, McItem};
use crate::model_io::{self, SliceInfo};
use crate::scaling::{self, fit_line, FitReport, MetricKind};
use crate::slicer::{self, validate_sparsity, RotationMode, SparsityLevel};
use crate::trainer::{self, Optimizer, TrainConfig};
use crate::transformer::{final_states, Model, ModelConfig};
use crate::vocab::Vocabulary;

pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Debug, Parser)]
#[command(name = "slicelab", version, about = "Slice toy transformers and fit sparsity laws")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a randomly initialized model
    Init(InitArgs),
    /// Train a model as a character-level LM on a text file
    Train(TrainArgs),
    /// Fold, rotate and slice a model at one sparsity
    Slice(SliceArgs),
    /// Evaluate perplexity and multiple-choice accuracy
    Eval(EvalArgs),
    /// Evaluate a model over a grid of sparsities
    Sweep(SweepArgs),
    /// Fit y = a*s + b to a sweep CSV
    Fit(FitArgs),
    /// Predict perplexity or accuracy at a sparsity
    Predict(PredictArgs),
    /// Entropy ratio of column-sliced embeddings
    Entropy(EntropyArgs),
    /// Generate a multiple-choice task file from a text
    MakeMc(MakeMcArgs),
}

#[derive(Debug, Clone, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long)]
    pub kv_heads: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 96)]
    pub vocab: usize,
    #[arg(long, default_value_t = 64)]
    pub max_seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for model.json and model.bin
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    /// Tokens per training sequence (defaults to the model's window)
    #[arg(long)]
    pub batch_len: Option<usize>,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    /// Fraction of the corpus tail kept out of training
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrationArgs {
    #[arg(long, default_value_t = 8)]
    pub calib_count: usize,
    /// Calibration window length (defaults to 64, capped at the model's window)
    #[arg(long)]
    pub calib_len: Option<usize>,
    #[arg(long, value_parser = parse_mode, default_value = "global")]
    pub mode: RotationMode,
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SliceArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_parser = parse_fraction)]
    pub s: f64,
    #[command(flatten)]
    pub calibration: CalibrationArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Multiple-choice task files (JSON lines)
    #[arg(long, num_args = 1..)]
    pub tasks: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, num_args = 1..)]
    pub tasks: Vec<PathBuf>,
    /// Comma-separated sparsities; fractions such as 3/8 are accepted
    #[arg(long, value_delimiter = ',', value_parser = parse_fraction)]
    pub grid: Option<Vec<f64>>,
    #[command(flatten)]
    pub calibration: CalibrationArgs,
    /// Output directory for sweep.csv and sweep.json
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// CSV with a `sparsity` column, e.g. a sweep.csv
    #[arg(long)]
    pub sweep: PathBuf,
    /// Column to fit: `token_ppl` (or `ppl`) or a `<task>_acc` column
    #[arg(long, default_value = "token_ppl")]
    pub metric: String,
    /// Output directory for fit.json and fit_plot.csv
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
#[command(group(clap::ArgGroup::new("baseline").required(true).args(["ppl0", "acc0"])))]
pub struct PredictArgs {
    #[arg(long)]
    pub ppl0: Option<f64>,
    #[arg(long)]
    pub acc0: Option<f64>,
    #[arg(long, value_parser = parse_fraction)]
    pub s: f64,
    /// Use a published fit, e.g. `--paper llama3 arc-e`
    #[arg(long, num_args = 2, value_names = ["MODEL", "DATASET"])]
    pub paper: Option<Vec<String>>,
    #[arg(long, allow_hyphen_values = true)]
    pub a: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub b: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EntropyArgs {
    /// Use final hidden states of this model on `--corpus`
    #[arg(long, requires = "corpus")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Rows of the synthetic Gaussian matrix (when no model is given)
    #[arg(long, default_value_t = 64)]
    pub rows: usize,
    #[arg(long, default_value_t = 256)]
    pub cols: usize,
    #[arg(long, value_delimiter = ',', value_parser = parse_fraction, default_value = "0,1/8,1/4,1/2")]
    pub grid: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct MakeMcArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 4)]
    pub choices: usize,
    #[arg(long, default_value_t = 32)]
    pub context_len: usize,
    #[arg(long, default_value_t = 8)]
    pub choice_len: usize,
    /// Draw items from the last fraction of the corpus only
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_mode(s: &str) -> std::result::Result<RotationMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A decimal or a fraction `p/q`.
pub fn parse_fraction(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((p, q)) => {
            let p: f64 = p.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
            let q: f64 = q.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
            p / q
        }
        None => s.parse().map_err(|e| format!("{s:?}: {e}"))?,
    };
    if !v.is_finite() {
        return Err(format!("{s:?} is not a finite number"));
    }
    Ok(v)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init(a) => cmd_init(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Slice(a) => cmd_slice(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Entropy(a) => cmd_entropy(&a),
        Command::MakeMc(a) => cmd_make_mc(&a),
    }
}

// ---------------------------------------------------------------- helpers

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::InvalidArgument(format!("cannot read {}: {e}", path.display()))
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Split a token stream into a training head and an evaluation tail.
pub fn split_holdout(tokens: &[usize], holdout: f64) -> Result<(&[usize], &[usize])> {
    if !(0.0..1.0).contains(&holdout) {
        return Err(Error::InvalidArgument(format!(
            "holdout fraction must lie in [0, 1), got {holdout}"
        )));
    }
    let tail = (tokens.len() as f64 * holdout).round() as usize;
    Ok(tokens.split_at(tokens.len() - tail))
}

/// The vocabulary stored with a model, or one built from `text`.
fn model_vocabulary(model_dir: &Path, text: &str) -> Result<Vocabulary> {
    let path = model_dir.join(VOCAB_FILE);
    if path.exists() {
        Vocabulary::load(&path)
    } else {
        log::warn!("{} has no {VOCAB_FILE}; building one from the corpus", model_dir.display());
        Ok(Vocabulary::from_corpus(text))
    }
}

fn check_vocab_fits(vocab: &Vocabulary, cfg: &ModelConfig) -> Result<()> {
    if vocab.len() > cfg.vocab_size {
        return Err(Error::InvalidArgument(format!(
            "corpus has {} distinct characters (with the reserved slot), model vocabulary holds {}",
            vocab.len(),
            cfg.vocab_size
        )));
    }
    Ok(())
}

fn load_unsliced(dir: &Path) -> Result<Model> {
    let (model, sliced) = model_io::load_model(dir)?;
    if let Some(info) = sliced {
        return Err(Error::InvalidArgument(format!(
            "{} is already sliced (s = {}); use the original model",
            dir.display(),
            info.s
        )));
    }
    Ok(model)
}

#[derive(Debug, Deserialize)]
struct McRecord {
    context: String,
    choices: Vec<String>,
    gold: usize,
}

/// Parse a JSON-lines multiple-choice file. Blank lines are skipped.
pub fn parse_mc_items(text: &str, vocab: &Vocabulary) -> Result<Vec<McItem>> {
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: McRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        let item = McItem::new(
            vocab.encode(&rec.context),
            rec.choices.iter().map(|c| vocab.encode(c)).collect(),
            rec.gold,
        )
        .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        items.push(item);
    }
    if items.is_empty() {
        return Err(Error::Format("task file has no items".into()));
    }
    Ok(items)
}

/// A named multiple-choice task.
#[derive(Debug, Clone)]
pub struct Task {
    pub name: String,
    pub items: Vec<McItem>,
    pub sha256: String,
}

fn task_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name: String = stem
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    if name.is_empty() {
        "task".into()
    } else {
        name
    }
}

fn load_tasks(paths: &[PathBuf], vocab: &Vocabulary) -> Result<Vec<Task>> {
    let mut tasks: Vec<Task> = Vec::new();
    for p in paths {
        let bytes = fs::read(p)?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| Error::Format(format!("{} is not UTF-8", p.display())))?;
        let name = task_name(p);
        if tasks.iter().any(|t| t.name == name) {
            return Err(Error::InvalidArgument(format!("two task files are both named {name}")));
        }
        tasks.push(Task {
            items: parse_mc_items(&text, vocab).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?,
            name,
            sha256: sha256_hex(&bytes),
        });
    }
    Ok(tasks)
}

// ------------------------------------------------------------------- init

pub fn cmd_init(a: &InitArgs) -> Result<()> {
    let head_dim = a.head_dim.unwrap_or(a.d / a.heads.max(1));
    let cfg = ModelConfig::new(
        a.d,
        a.m.unwrap_or(2 * a.d),
        a.heads,
        head_dim,
        a.kv_heads.unwrap_or(a.heads),
        a.blocks,
        a.vocab,
        a.max_seq_len,
    )?;
    let model = Model::init(cfg, a.seed);
    model_io::save_model(&a.out, &model, None)?;
    log::info!(
        "wrote {} parameters to {}",
        model.weights.parameter_count(),
        a.out.display()
    );
    Ok(())
}

// ------------------------------------------------------------------ train

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut model = load_unsliced(&a.model)?;
    let text = read_text(&a.corpus)?;
    let vocab = if a.model.join(VOCAB_FILE).exists() {
        Vocabulary::load(&a.model.join(VOCAB_FILE))?
    } else {
        Vocabulary::from_corpus(&text)
    };
    check_vocab_fits(&vocab, &model.config)?;
    let tokens = vocab.encode(&text);
    let (train_tokens, _) = split_holdout(&tokens, a.holdout)?;
    let cfg = TrainConfig {
        lr: a.lr,
        steps: a.steps,
        batch_len: a.batch_len.unwrap_or(model.config.max_seq_len),
        seed: a.seed,
        optimizer: match a.optimizer {
            OptimizerArg::Adam => Optimizer::adam(),
            OptimizerArg::Sgd => Optimizer::Sgd,
        },
    };
    let losses = trainer::train(&mut model, train_tokens, &cfg)?;
    model_io::save_model(&a.out, &model, None)?;
    vocab.save(&a.out.join(VOCAB_FILE))?;
    let mut w = csv::Writer::from_path(a.out.join("loss.csv"))?;
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush()?;
    if let Some(last) = losses.last() {
        log::info!("final training loss {last:.4} nats");
    }
    Ok(())
}

// ------------------------------------------------------------------ slice

/// Inputs shared by slice and sweep: a model, its vocabulary, the encoded
/// corpus split into calibration and evaluation parts.
struct Prepared {
    model: Model,
    vocab: Vocabulary,
    tokens: Vec<usize>,
    split: usize,
}

impl CalibrationArgs {
    fn windows(&self, model: &Model, source: &[usize]) -> Result<(usize, Vec<Vec<usize>>)> {
        let len = self.calib_len.unwrap_or(model.config.max_seq_len.min(64));
        Ok((len, slicer::calibration_windows(source, self.calib_count, len, self.seed)?))
    }
}

impl Prepared {
    fn load(model_dir: &Path, corpus: &Path, holdout: f64) -> Result<Self> {
        let model = load_unsliced(model_dir)?;
        let text = read_text(corpus)?;
        let vocab = model_vocabulary(model_dir, &text)?;
        check_vocab_fits(&vocab, &model.config)?;
        let tokens = vocab.encode(&text);
        let split = split_holdout(&tokens, holdout)?.0.len();
        Ok(Self {
            model,
            vocab,
            tokens,
            split,
        })
    }

    fn calibration_source(&self) -> &[usize] {
        &self.tokens[..self.split]
    }

    fn eval_stream(&self) -> &[usize] {
        if self.split == self.tokens.len() {
            &self.tokens
        } else {
            &self.tokens[self.split..]
        }
    }
}

/// Folded and rotated model ready to be sliced at any level.
pub struct RotatedModel {
    pub model: Model,
    pub plan: slicer::RotationPlan,
}

pub fn rotate_for_slicing(model: &Model, calibration: &[Vec<usize>], mode: RotationMode) -> Result<RotatedModel> {
    let folded = Model::new(model.config.clone(), slicer::fold_norm_weights(&model.weights))?;
    let plan = slicer::compute_rotation(&folded, calibration, mode)?;
    let model = slicer::apply_rotation(&folded, &plan)?;
    Ok(RotatedModel { model, plan })
}

pub fn cmd_slice(a: &SliceArgs) -> Result<()> {
    let p = Prepared::load(&a.model, &a.corpus, a.calibration.holdout)?;
    let level = validate_sparsity(p.model.config.d, a.s)?;
    let c = &a.calibration;
    let (_, calib) = c.windows(&p.model, p.calibration_source())?;
    let (sliced, plan) = slicer::slice_pipeline(&p.model, &calib, c.mode, level)?;
    let info = SliceInfo {
        s: level.s(),
        d_original: level.d(),
        d_kept: level.d_kept(),
        mode: c.mode,
    };
    model_io::save_model(&a.out, &sliced.model, Some(info))?;
    p.vocab.save(&a.out.join(VOCAB_FILE))?;
    log::info!(
        "kept {} of {} dimensions; retained second-moment mass {:.4}",
        level.d_kept(),
        level.d(),
        plan.retained_mass(0, level.d_kept())
    );
    Ok(())
}

// ------------------------------------------------------------------- eval

/// Final hidden states over up to `windows` consecutive chunks of `stream`,
/// stacked row-wise.
pub fn stacked_final_states(model: &Model, stream: &[usize], windows: usize) -> Result<DenseMatrix> {
    let mut rows = Vec::new();
    for chunk in stream.chunks(model.config.max_seq_len).take(windows) {
        rows.extend(final_states(&model.weights, chunk, &model.config)?.to_rows());
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("evaluation stream is empty".into()));
    }
    DenseMatrix::from_rows(&rows)
}

const EMBEDDING_WINDOWS: usize = 4;

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub token_ppl: f64,
    pub mean_nll: f64,
    pub token_count: usize,
    pub log2_emb_ppl: f64,
    pub accuracy: BTreeMap<String, f64>,
}

pub fn evaluate(model: &Model, stream: &[usize], tasks: &[Task]) -> Result<EvalReport> {
    let ppl = metrics::stream_perplexity(model, stream)?;
    let states = stacked_final_states(model, stream, EMBEDDING_WINDOWS)?;
    let accuracy = tasks
        .iter()
        .map(|t| Ok((t.name.clone(), mc_accuracy(model, &t.items)?)))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        token_ppl: ppl.ppl,
        mean_nll: ppl.mean_nll,
        token_count: ppl.token_count,
        log2_emb_ppl: log2_embedding_ppl(&embedding_entropy(&states)?),
        accuracy,
    })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (model, _) = model_io::load_model(&a.model)?;
    let text = read_text(&a.corpus)?;
    let vocab = model_vocabulary(&a.model, &text)?;
    let tokens = vocab.encode(&text);
    let (_, tail) = split_holdout(&tokens, a.holdout)?;
    let stream = if tail.is_empty() { &tokens[..] } else { tail };
    let tasks = load_tasks(&a.tasks, &vocab)?;
    let report = evaluate(&model, stream, &tasks)?;
    emit(a.out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))
}

// ------------------------------------------------------------------ sweep

/// The default grid restricted to sparsities admissible for width `d`.
pub fn default_grid(d: usize) -> Vec<f64> {
    [0.0, 0.125, 0.25, 0.375, 0.5]
        .into_iter()
        .filter(|&s| validate_sparsity(d, s).is_ok())
        .collect()
}

/// Validate every grid value, then sort and drop duplicates.
pub fn validate_grid(d: usize, grid: &[f64]) -> Result<Vec<SparsityLevel>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("sparsity grid is empty".into()));
    }
    let mut levels = grid
        .iter()
        .map(|&s| validate_sparsity(d, s))
        .collect::<Result<Vec<_>>>()?;
    levels.sort_by(|a, b| a.d_kept().cmp(&b.d_kept()).reverse());
    levels.dedup_by_key(|l| l.d_kept());
    Ok(levels)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRecord {
    pub s: f64,
    pub d_kept: usize,
    pub token_ppl: f64,
    pub mean_nll: f64,
    pub log2_emb_ppl: f64,
    pub accuracy: BTreeMap<String, f64>,
    pub y_ppl: f64,
    /// `None` where the transform is undefined (zero accuracy).
    pub y_acc: BTreeMap<String, Option<f64>>,
}

/// Slice at every level and evaluate. Levels run in parallel; records come
/// back sorted by ascending `s`. The first record must be `s = 0` for the
/// derived columns.
pub fn sweep(rotated: &RotatedModel, levels: &[SparsityLevel], stream: &[usize], tasks: &[Task]) -> Result<Vec<SweepRecord>> {
    let mut evals: Vec<(SparsityLevel, EvalReport)> = levels
        .par_iter()
        .map(|&level| {
            let sliced = slicer::slice_model(&rotated.model, &rotated.plan, level)?;
            Ok((level, evaluate(&sliced.model, stream, tasks)?))
        })
        .collect::<Result<_>>()?;
    evals.sort_by(|a, b| a.0.s().total_cmp(&b.0.s()));

    let base = evals
        .iter()
        .find(|(l, _)| l.is_identity())
        .map(|(_, r)| r.clone());
    evals
        .into_iter()
        .map(|(level, r)| {
            let (y_ppl, y_acc) = match &base {
                Some(b) => (
                    scaling::y_ppl(b.token_ppl, r.token_ppl)?,
                    r.accuracy
                        .iter()
                        .map(|(k, &acc)| (k.clone(), scaling::y_acc(b.accuracy[k], acc).ok()))
                        .collect(),
                ),
                None => (f64::NAN, r.accuracy.keys().map(|k| (k.clone(), None)).collect()),
            };
            Ok(SweepRecord {
                s: level.s(),
                d_kept: level.d_kept(),
                token_ppl: r.token_ppl,
                mean_nll: r.mean_nll,
                log2_emb_ppl: r.log2_emb_ppl,
                accuracy: r.accuracy,
                y_ppl,
                y_acc,
            })
        })
        .collect()
}

pub fn ppl_non_decreasing(records: &[SweepRecord]) -> bool {
    records.windows(2).all(|w| w[1].token_ppl >= w[0].token_ppl)
}

pub fn sweep_csv(records: &[SweepRecord]) -> Result<String> {
    let tasks: Vec<String> = records
        .first()
        .map(|r| r.accuracy.keys().cloned().collect())
        .unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sparsity".to_string(), "token_ppl".into(), "log2_emb_ppl".into()];
    header.extend(tasks.iter().map(|t| format!("{t}_acc")));
    header.push("y_ppl".into());
    header.extend(tasks.iter().map(|t| format!("y_acc_{t}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.s.to_string(), r.token_ppl.to_string(), r.log2_emb_ppl.to_string()];
        row.extend(tasks.iter().map(|t| r.accuracy[t].to_string()));
        row.push(if r.y_ppl.is_finite() { r.y_ppl.to_string() } else { String::new() });
        row.extend(tasks.iter().map(|t| r.y_acc[t].map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[derive(Debug, Serialize)]
struct CalibrationSpec {
    count: usize,
    len: usize,
    seed: u64,
    mode: RotationMode,
}

#[derive(Debug, Serialize)]
struct Provenance {
    model_sha256: String,
    corpus: String,
    corpus_sha256: String,
    tasks: BTreeMap<String, String>,
    calibration: CalibrationSpec,
    holdout: f64,
    eval_tokens: usize,
    embedding_windows: usize,
}

#[derive(Debug, Serialize)]
struct SweepReport<'a> {
    model_id: String,
    d: usize,
    ppl_non_decreasing: bool,
    records: &'a [SweepRecord],
    provenance: Provenance,
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let c = &a.calibration;
    let p = Prepared::load(&a.model, &a.corpus, c.holdout)?;
    let d = p.model.config.d;
    let grid = a.grid.clone().unwrap_or_else(|| default_grid(d));
    // rejects inadmissible values before anything is evaluated
    let levels = validate_grid(d, &grid)?;
    let tasks = load_tasks(&a.tasks, &p.vocab)?;

    let (calib_len, calib) = c.windows(&p.model, p.calibration_source())?;
    let rotated = rotate_for_slicing(&p.model, &calib, c.mode)?;
    let records = sweep(&rotated, &levels, p.eval_stream(), &tasks)?;

    let monotone = ppl_non_decreasing(&records);
    if !monotone {
        log::warn!("token perplexity is not non-decreasing in s over this grid");
    }
    if !records.first().is_some_and(|r| r.s == 0.0) {
        log::warn!("grid has no s = 0 baseline; derived columns are left empty");
    }

    let model_bytes = fs::read(a.model.join(model_io::WEIGHTS_FILE))?;
    let report = SweepReport {
        model_id: file_label(&a.model),
        d,
        ppl_non_decreasing: monotone,
        records: &records,
        provenance: Provenance {
            model_sha256: sha256_hex(&model_bytes),
            corpus: file_label(&a.corpus),
            corpus_sha256: sha256_hex(&fs::read(&a.corpus)?),
            tasks: tasks.iter().map(|t| (t.name.clone(), t.sha256.clone())).collect(),
            calibration: CalibrationSpec {
                count: c.calib_count,
                len: calib_len,
                seed: c.seed,
                mode: c.mode,
            },
            holdout: c.holdout,
            eval_tokens: p.eval_stream().len(),
            embedding_windows: EMBEDDING_WINDOWS,
        },
    };
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("sweep.csv"), sweep_csv(&records)?)?;
    write_json(&a.out.join("sweep.json"), &report)
}

// -------------------------------------------------------------------- fit

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitOutput {
    pub column: String,
    pub baseline: f64,
    #[serde(flatten)]
    pub fit: FitReport,
}

/// Transform one column of a CSV against its `s = 0` row and fit a line.
/// Returns the fit and the plot table `(s, y, y_fit)`.
pub fn fit_csv(text: &str, metric: &str) -> Result<(FitOutput, Vec<(f64, f64, f64)>)> {
    let usage = "expected a CSV with a `sparsity` column and a metric column, e.g. `sparsity,token_ppl`";
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.len() < 2 {
        return Err(Error::InvalidArgument(format!("CSV has a single column; {usage}")));
    }
    let s_col = header
        .iter()
        .position(|h| h == "sparsity" || h == "s")
        .ok_or_else(|| Error::InvalidArgument(format!("CSV has no sparsity column; {usage}")))?;
    let column = match metric {
        "ppl" => "token_ppl".to_string(),
        m if header.iter().any(|h| h == m) => m.to_string(),
        m if header.iter().any(|h| *h == format!("{m}_acc")) => format!("{m}_acc"),
        m => {
            return Err(Error::InvalidArgument(format!(
                "no column {m:?}; available: {}",
                header.join(", ")
            )))
        }
    };
    let kind = if column.ends_with("ppl") {
        MetricKind::Perplexity
    } else if column.ends_with("_acc") {
        MetricKind::Accuracy
    } else {
        return Err(Error::InvalidArgument(format!(
            "column {column:?} is neither a perplexity (`*ppl`) nor an accuracy (`*_acc`)"
        )));
    };
    let m_col = header
        .iter()
        .position(|h| *h == column)
        .ok_or_else(|| Error::InvalidArgument(format!("no column {column:?}")))?;

    let mut raw: Vec<(f64, f64)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let s: f64 = parse_fraction(field(s_col)).map_err(Error::InvalidArgument)?;
        if field(m_col).is_empty() {
            continue;
        }
        let v: f64 = field(m_col)
            .parse()
            .map_err(|e| Error::Format(format!("{column} value {:?}: {e}", field(m_col))))?;
        raw.push((s, v));
    }
    let baseline = raw
        .iter()
        .find(|(s, _)| *s == 0.0)
        .map(|p| p.1)
        .ok_or_else(|| Error::InvalidArgument("no s = 0 baseline row; the transforms need it".into()))?;

    let mut points = Vec::new();
    for &(s, v) in &raw {
        let y = match kind {
            MetricKind::Perplexity => scaling::y_ppl(baseline, v),
            MetricKind::Accuracy => scaling::y_acc(baseline, v),
        };
        match y {
            Ok(y) => points.push((s, y)),
            Err(e) => log::warn!("skipping s = {s}: {e}"),
        }
    }
    if points.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 usable rows, found {}",
            points.len()
        )));
    }
    let fit = fit_line(&points)?;
    points.sort_by(|p, q| p.0.total_cmp(&q.0));
    let plot = points.iter().map(|&(s, y)| (s, y, fit.predict(s))).collect();
    Ok((
        FitOutput {
            fit: FitReport::new(&fit, column.clone(), kind),
            column,
            baseline,
        },
        plot,
    ))
}

pub fn cmd_fit(a: &FitArgs) -> Result<()> {
    let text = read_text(&a.sweep)?;
    let (out, plot) = fit_csv(&text, &a.metric)?;
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("fit.json"), &out)?;
    let mut w = csv::Writer::from_path(a.out.join("fit_plot.csv"))?;
    w.write_record(["s", "y", "y_fit"])?;
    for (s, y, f) in plot {
        w.write_record([s.to_string(), y.to_string(), f.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- predict

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub kind: MetricKind,
    pub baseline: f64,
    pub s: f64,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exceeds_one: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

pub fn predict(a: &PredictArgs) -> Result<Prediction> {
    let paper = match &a.paper {
        Some(v) => {
            let (model, dataset) = (&v[0], &v[1]);
            let kind = scaling::registry_metric(dataset).ok_or_else(|| Error::UnknownKey {
                key: dataset.clone(),
                available: scaling::PAPER_COEFFICIENTS
                    .iter()
                    .map(|r| r.dataset)
                    .collect::<std::collections::BTreeSet<_>>()
                    .into_iter()
                    .collect::<Vec<_>>()
                    .join(", "),
            })?;
            Some(scaling::paper_coefficients(model, dataset, kind)?)
        }
        None => None,
    };
    let coeffs = match (&paper, a.a, a.b) {
        (Some(p), None, None) => Some((p.a, p.b)),
        (Some(_), _, _) => {
            return Err(Error::InvalidArgument("--paper and --a/--b are mutually exclusive".into()))
        }
        (None, Some(x), Some(y)) => Some((x, y)),
        (None, None, None) => None,
        _ => return Err(Error::InvalidArgument("--a and --b must be given together".into())),
    };
    let source = paper.map(|p| format!("{} / {}", p.model, p.dataset));

    match (a.ppl0, a.acc0) {
        (Some(ppl0), None) => {
            if paper.is_some_and(|p| p.metric != MetricKind::Perplexity) {
                return Err(Error::InvalidArgument(
                    "that registry row is an accuracy fit; use --acc0".into(),
                ));
            }
            let value = match coeffs {
                Some((x, y)) => scaling::predict_ppl_fitted(ppl0, a.s, x, y)?,
                None => scaling::predict_ppl(ppl0, a.s)?,
            };
            Ok(Prediction {
                kind: MetricKind::Perplexity,
                baseline: ppl0,
                s: a.s,
                value,
                exceeds_one: None,
                a: coeffs.map(|c| c.0),
                b: coeffs.map(|c| c.1),
                source,
            })
        }
        (None, Some(acc0)) => {
            if paper.is_some_and(|p| p.metric != MetricKind::Accuracy) {
                return Err(Error::InvalidArgument(
                    "that registry row is a perplexity fit; use --ppl0".into(),
                ));
            }
            let (x, y) = coeffs.ok_or_else(|| {
                Error::InvalidArgument(
                    "accuracy has no ideal law; give --paper MODEL DATASET or --a and --b".into(),
                )
            })?;
            let p = scaling::predict_acc(acc0, a.s, x, y)?;
            Ok(Prediction {
                kind: MetricKind::Accuracy,
                baseline: acc0,
                s: a.s,
                value: p.value,
                exceeds_one: Some(p.exceeds_one),
                a: Some(x),
                b: Some(y),
                source,
            })
        }
        _ => Err(Error::InvalidArgument("give exactly one of --ppl0 and --acc0".into())),
    }
}

pub fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let p = predict(a)?;
    emit(a.out.as_deref(), &(serde_json::to_string_pretty(&p)? + "\n"))
}

// ---------------------------------------------------------------- entropy

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyRow {
    pub s: f64,
    pub ratio: f64,
    pub expected: f64,
    pub abs_error: f64,
}

/// Entropy ratio of the leading `(1 − s)` columns of `e` for each `s`.
pub fn entropy_table(e: &DenseMatrix, grid: &[f64]) -> Result<Vec<EntropyRow>> {
    let levels = validate_grid(e.cols(), grid)?;
    levels
        .iter()
        .map(|l| {
            let ratio = if l.is_identity() {
                1.0
            } else {
                metrics::entropy_ratio(&e.column_block(0, l.d_kept()), e)?
            };
            let expected = 1.0 - l.s();
            Ok(EntropyRow {
                s: l.s(),
                ratio,
                expected,
                abs_error: (ratio - expected).abs(),
            })
        })
        .collect()
}

pub fn cmd_entropy(a: &EntropyArgs) -> Result<()> {
    let e = match (&a.model, &a.corpus) {
        (Some(dir), Some(corpus)) => {
            let (model, _) = model_io::load_model(dir)?;
            let text = read_text(corpus)?;
            let tokens = model_vocabulary(dir, &text)?.encode(&text);
            stacked_final_states(&model, &tokens, EMBEDDING_WINDOWS)?
        }
        _ => SeededRng::new(a.seed).gaussian_matrix(a.rows, a.cols, 1.0),
    };
    let rows = entropy_table(&e, &a.grid)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["s", "ratio", "expected", "abs_error"])?;
    for r in rows {
        w.write_record([r.s, r.ratio, r.expected, r.abs_error].map(|v| v.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    emit(a.out.as_deref(), &String::from_utf8(bytes).expect("csv output is UTF-8"))
}

// ---------------------------------------------------------------- make-mc

#[derive(Debug, Serialize)]
struct McOut<'a> {
    context: &'a str,
    choices: Vec<&'a str>,
    gold: usize,
}

/// Items whose gold answer is the true continuation of a context drawn from
/// `text`; distractors are other spans of the same text.
pub fn make_mc(text: &str, a: &MakeMcArgs) -> Result<String> {
    let chars: Vec<char> = text.chars().collect();
    let span = a.context_len + a.choice_len;
    let tail = (chars.len() as f64 * a.holdout).round() as usize;
    let lo = if tail >= span { chars.len() - tail } else { 0 };
    if a.choices < 2 || a.context_len == 0 || a.choice_len == 0 || chars.len() - lo < span + 1 {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {}-choice items of {}+{} characters from {} characters",
            a.choices,
            a.context_len,
            a.choice_len,
            chars.len() - lo
        )));
    }
    let slice = |start: usize, len: usize| chars[start..start + len].iter().collect::<String>();
    let mut rng = SeededRng::new(a.seed);
    let mut out = String::new();
    for _ in 0..a.count {
        let start = lo + rng.below(chars.len() - lo - span + 1);
        let context = slice(start, a.context_len);
        let gold_text = slice(start + a.context_len, a.choice_len);
        let gold = rng.below(a.choices);
        let mut choices: Vec<String> = Vec::with_capacity(a.choices);
        let mut attempts = 0;
        while choices.len() + 1 < a.choices {
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::InvalidArgument("text too repetitive for distinct distractors".into()));
            }
            let d = slice(rng.below(chars.len() - a.choice_len + 1), a.choice_len);
            if d != gold_text && !choices.contains(&d) {
                choices.push(d);
            }
        }
        choices.insert(gold, gold_text);
        let rec = McOut {
            context: &context,
            choices: choices.iter().map(String::as_str).collect(),
            gold,
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn cmd_make_mc(a: &MakeMcArgs) -> Result<()> {
    let text = read_text(&a.corpus)?;
    fs::write(&a.out, make_mc(&text, a)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fractions_parse() {
        assert_eq!(parse_fraction("3/8").unwrap(), 0.375);
        assert_eq!(parse_fraction(" 0.25 ").unwrap(), 0.25);
        assert!(parse_fraction("1/0").is_err());
        assert!(parse_fraction("x").is_err());
    }

    #[test]
    fn grid_is_sorted_and_deduplicated() {
        let levels = validate_grid(16, &[0.5, 0.0, 0.25, 0.5]).unwrap();
        let s: Vec<f64> = levels.iter().map(|l| l.s()).collect();
        assert_eq!(s, vec![0.0, 0.25, 0.5]);
        assert!(validate_grid(10, &[0.0, 0.33]).is_err());
        assert_eq!(default_grid(12), vec![0.0, 0.25, 0.5]);
        assert_eq!(default_grid(64), vec![0.0, 0.125, 0.25, 0.375, 0.5]);
    }

    #[test]
    fn holdout_split() {
        let t: Vec<usize> = (0..10).collect();
        let (a, b) = split_holdout(&t, 0.2).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(split_holdout(&t, 0.0).unwrap().1.len(), 0);
        assert!(split_holdout(&t, 1.0).is_err());
    }

    #[test]
    fn fit_on_law_exact_csv() {
        let mut csv = String::from("sparsity,token_ppl\n");
        for s in [0.0, 0.125, 0.25, 0.375, 0.5] {
            csv.push_str(&format!("{s},{}\n", scaling::predict_ppl(10.0, s).unwrap()));
        }
        let (out, plot) = fit_csv(&csv, "ppl").unwrap();
        assert!((out.fit.a + 1.0).abs() < 1e-9);
        assert!((out.fit.b - 1.0).abs() < 1e-9);
        assert!(out.fit.rmse < 1e-9);
        assert!((out.baseline - 10.0).abs() < 1e-12);
        assert_eq!(plot.len(), 5);
    }

    #[test]
    fn fit_error_paths() {
        assert!(fit_csv("sparsity\n0\n0.5\n", "ppl")
            .unwrap_err()
            .to_string()
            .contains("single column"));
        assert!(fit_csv("sparsity,token_ppl\n0.25,4\n0.5,8\n", "ppl")
            .unwrap_err()
            .to_string()
            .contains("baseline"));
        assert!(fit_csv("sparsity,token_ppl\n0,4\n", "ppl").is_err());
        assert!(fit_csv("sparsity,token_ppl\n0,4\n0.5,8\n", "arc").is_err());
    }

    #[test]
    fn mc_lines_parse() {
        let v = Vocabulary::from_corpus("abc ");
        let items = parse_mc_items(
            "{\"context\": \"ab\", \"choices\": [\"c\", \"a b\"], \"gold\": 1}\n\n",
            &v,
        )
        .unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].choices[1], vec![2, 1, 3]);
        assert!(parse_mc_items("{\"context\": \"ab\", \"choices\": [\"c\"], \"gold\": 0}", &v).is_err());
        assert!(parse_mc_items("", &v).is_err());
    }
}
