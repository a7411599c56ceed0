//! The `metnet` command line: `train`, `eval`, `sample-episodes` and
//! `export-points`.
//!
//! Every flag can also be given in a `key = value` file passed with
//! `--config`; keys are flag names without the leading dashes. Flags on the
//! command line win over the file.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::corpus::{parse_conll, Corpus};
use crate::data::{EpisodeConfig, InferenceVariant, LossVariant, OptimizerKind, TrainConfig};
use crate::embedding::{EmbeddingProvider, EmbeddingStore, HashEmbedder, DEFAULT_DIM};
use crate::error::{Error, Result};
use crate::inference::{evaluate, EvalOptions};
use crate::net::{init_params, NetShape, TripletNetParams, DEFAULT_HIDDEN1, DEFAULT_HIDDEN2};
use crate::rng::stream_seed;
use crate::sampler::{episode_from_line, episode_to_line, sample_episode, SamplerState};
use crate::trainer::{adapt_episode, prepare_episode, train, TrainerState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "metnet", version, about = "Few-shot NER with a meta-learned triplet network")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Meta-train on a corpus and write checkpoints plus a loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on test episodes.
    Eval(EvalArgs),
    /// Sample episodes and print one JSON object per line.
    SampleEpisodes(SampleArgs),
    /// Write mapped prototypes and query tokens of one episode as CSV.
    ExportPoints(ExportArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// File of `key = value` lines supplying defaults for any flag
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Corpus in two-column CoNLL format
    #[arg(long, value_name = "PATH")]
    corpus: PathBuf,
    /// EMBV1 token embeddings; hashed embeddings are used when absent
    #[arg(long, value_name = "PATH")]
    embeddings: Option<PathBuf>,
    /// Dimension of hashed embeddings
    #[arg(long, default_value_t = DEFAULT_DIM)]
    hash_dim: usize,
    /// Seed of the hashed embeddings
    #[arg(long, default_value_t = 0)]
    hash_seed: u64,
    /// Tag naming the non-entity class
    #[arg(long, default_value = "O")]
    o_tag: String,
    /// Master seed for sampling, initialization and dropout
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct EpisodeArgs {
    /// Entity types per episode (N)
    #[arg(long, default_value_t = 5)]
    n_ways: usize,
    /// Support mentions per type (K)
    #[arg(long, default_value_t = 1)]
    k_shots: usize,
    /// Query mentions per type (L)
    #[arg(long, default_value_t = 1)]
    query_size: usize,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Inner-loop learning rate (gamma)
    #[arg(long, default_value_t = 0.2)]
    inner_lr: f64,
    /// Meta learning rate (beta)
    #[arg(long, default_value_t = 1e-4)]
    meta_lr: f64,
    /// Inner-loop steps (T)
    #[arg(long, default_value_t = 3)]
    inner_steps: usize,
    /// Weight between the positive and negative terms of the loss
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    /// Dropout rate on the hidden layer during meta-training
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    /// Episodes per outer step
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Negatives per type when building triples [default: k-shots]
    #[arg(long)]
    neg_per_class: Option<usize>,
    /// Training objective
    #[arg(long, default_value_t = LossVariant::Improved)]
    loss_variant: LossVariant,
    /// Query labeling rule
    #[arg(long, default_value_t = InferenceVariant::MarginRegion)]
    inference_variant: InferenceVariant,
    /// Margin of the fixed-margin and original losses
    #[arg(long, default_value_t = 5.0)]
    fixed_margin: f64,
    /// Outer-loop optimizer
    #[arg(long, default_value_t = OptimizerKind::Sgd)]
    optimizer: OptimizerKind,
}

impl ModelArgs {
    fn train_config(&self, epochs: usize) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            inner_lr: self.inner_lr,
            meta_lr: self.meta_lr,
            inner_steps: self.inner_steps,
            alpha: self.alpha,
            epochs,
            dropout_rate: self.dropout,
            episodes_per_batch: self.batch,
            neg_per_class: self.neg_per_class,
            loss_variant: self.loss_variant,
            inference_variant: self.inference_variant,
            fixed_margin: self.fixed_margin,
            optimizer: self.optimizer,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    episode: EpisodeArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Outer steps
    #[arg(long, default_value_t = 6000)]
    epochs: usize,
    /// First hidden width
    #[arg(long, default_value_t = DEFAULT_HIDDEN1)]
    hidden1: usize,
    /// Output width
    #[arg(long, default_value_t = DEFAULT_HIDDEN2)]
    hidden2: usize,
    /// Margin slots in the checkpoint [default: n-ways]
    #[arg(long)]
    n_margins: Option<usize>,
    /// Write an intermediate checkpoint every this many steps (0 = never)
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Output directory for checkpoint.mtn and loss.tsv
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    episode: EpisodeArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Checkpoint written by `train`
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Test episodes
    #[arg(long, default_value_t = 500)]
    episodes: usize,
    /// Upper bound on evaluation threads
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Training corpus; when given, its entity types must not occur in the test corpus
    #[arg(long, value_name = "PATH")]
    train_corpus: Option<PathBuf>,
    /// Report layout: `text`, or `tsv` (n_episodes, P, R, F1, mean, std)
    #[arg(long, default_value = "text", value_parser = ["text", "tsv"])]
    format: String,
    /// Write the report here instead of stdout
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    episode: EpisodeArgs,
    /// Episodes to emit
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Write episodes here instead of stdout
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    episode: EpisodeArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Checkpoint written by `train`
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Sampler position of the exported episode
    #[arg(long, default_value_t = 0)]
    episode_index: u64,
    /// Read the episode from the first line of this file (as written by `sample-episodes`) instead of sampling
    #[arg(long, value_name = "PATH")]
    episode_file: Option<PathBuf>,
    /// Write CSV here instead of stdout
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidConfig(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_error(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: message.into(),
    }
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code. Data goes to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    match dispatch(args, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message.trim_end());
            f.code
        }
    }
}

fn dispatch(args: Vec<OsString>, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let args = splice_config(args)?;
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    write!(out, "{}", e.render()).map_err(Error::from)?;
                    Ok(())
                }
                _ => Err(config_error(e.render().to_string())),
            };
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| config_error(e.to_string()))?;
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::SampleEpisodes(a) => cmd_sample(&a, out),
        Command::ExportPoints(a) => cmd_export(&a, out),
    }
}

/// Inserts `--key value` pairs from the `--config` file right after the
/// subcommand, so explicit flags (which come later) override them.
fn splice_config(args: Vec<OsString>) -> std::result::Result<Vec<OsString>, Failure> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        let Some(s) = a.to_str() else { continue };
        if s == "--config" {
            path = args.get(i + 1).cloned();
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(p.into());
        }
    }
    let Some(path) = path else { return Ok(args) };
    let text = fs::read_to_string(&path)
        .map_err(|e| config_error(format!("config: cannot read {}: {e}", Path::new(&path).display())))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| config_error(format!("config line {}: expected key = value", n + 1)))?;
        let key = key.trim();
        if key.is_empty() || key == "config" {
            return Err(config_error(format!("config line {}: invalid key {key:?}", n + 1)));
        }
        extra.push(OsString::from(format!("--{key}")));
        extra.push(OsString::from(value.trim()));
    }
    let mut merged = Vec::with_capacity(args.len() + extra.len());
    let split = args.len().min(2);
    merged.extend_from_slice(&args[..split]);
    merged.extend(extra);
    merged.extend_from_slice(&args[split..]);
    Ok(merged)
}

fn require_file(field: &str, path: &Path) -> std::result::Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_error(format!("{field}: no such file {}", path.display())))
    }
}

fn load_corpus(field: &str, path: &Path, o_tag: &str) -> std::result::Result<Corpus, Failure> {
    require_file(field, path)?;
    Ok(parse_conll(BufReader::new(File::open(path).map_err(Error::from)?), o_tag)?)
}

fn load_provider(data: &DataArgs) -> std::result::Result<Box<dyn EmbeddingProvider>, Failure> {
    match &data.embeddings {
        Some(path) => {
            require_file("embeddings", path)?;
            let store = EmbeddingStore::load(BufReader::new(File::open(path).map_err(Error::from)?))?;
            Ok(Box::new(store))
        }
        None => Ok(Box::new(HashEmbedder::new(data.hash_dim, data.hash_seed)?)),
    }
}

fn load_checkpoint(path: &Path) -> std::result::Result<TripletNetParams<f32>, Failure> {
    require_file("checkpoint", path)?;
    let file = File::open(path).map_err(Error::CheckpointIo)?;
    Ok(TripletNetParams::load(BufReader::new(file))?)
}

fn episode_config(e: &EpisodeArgs, seed: u64, stream: &str) -> Result<EpisodeConfig> {
    EpisodeConfig::new(e.n_ways, e.k_shots, e.query_size, stream_seed(seed, stream))
}

fn save_checkpoint(params: &TripletNetParams<f32>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(Error::CheckpointIo)?;
    let mut w = BufWriter::new(file);
    params.save(&mut w)?;
    w.flush().map_err(Error::CheckpointIo)
}

fn open_output<'a>(path: &Option<PathBuf>, out: &'a mut dyn Write) -> Result<Box<dyn Write + 'a>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(out),
    })
}

fn cmd_train(a: &TrainArgs, _out: &mut dyn Write) -> std::result::Result<(), Failure> {
    // `--epochs 0` only writes the initial checkpoint; the config record itself
    // keeps a positive epoch count
    let cfg = a.model.train_config(a.epochs.max(1))?;
    let episode_cfg = episode_config(&a.episode, a.data.seed, "train-episodes")?;
    let corpus = load_corpus("corpus", &a.data.corpus, &a.data.o_tag)?;
    let provider = load_provider(&a.data)?;
    fs::create_dir_all(&a.out).map_err(Error::from)?;

    let n_margins = a.n_margins.unwrap_or(a.episode.n_ways);
    let shape = NetShape::new(provider.dim(), n_margins).with_hidden(a.hidden1, a.hidden2);
    let params = init_params(shape, a.data.seed)?;
    let state = TrainerState::new(params, a.data.seed);

    let mut log = BufWriter::new(File::create(a.out.join("loss.tsv")).map_err(Error::from)?);
    writeln!(log, "step\tsupport_loss\tquery_loss").map_err(Error::from)?;
    let state = train(&corpus, provider.as_ref(), &episode_cfg, &cfg, state, a.epochs, |st, step| {
        writeln!(log, "{}", step.to_line())?;
        if a.checkpoint_every > 0 && st.epoch % a.checkpoint_every == 0 {
            save_checkpoint(&st.params, &a.out.join(format!("checkpoint-{:06}.mtn", st.epoch)))?;
        }
        Ok(())
    })?;
    log.flush().map_err(Error::from)?;
    save_checkpoint(&state.params, &a.out.join("checkpoint.mtn"))?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let cfg = a.model.train_config(TrainConfig::default().epochs)?;
    let episode_cfg = episode_config(&a.episode, a.data.seed, "eval-episodes")?;
    if a.workers == 0 {
        return Err(config_error("workers: must be at least 1"));
    }
    let corpus = load_corpus("corpus", &a.data.corpus, &a.data.o_tag)?;
    let train_corpus = match &a.train_corpus {
        Some(p) => Some(load_corpus("train-corpus", p, &a.data.o_tag)?),
        None => None,
    };
    let provider = load_provider(&a.data)?;
    let params = load_checkpoint(&a.checkpoint)?;
    let opts = EvalOptions {
        n_episodes: a.episodes,
        workers: a.workers,
        train_labels: train_corpus.as_ref().map(|c| c.label_set()),
    };
    let report = evaluate(&params, &corpus, provider.as_ref(), &episode_cfg, &cfg, &opts)?;
    let mut w = open_output(&a.out, out)?;
    if a.format == "tsv" {
        writeln!(w, "{}", report.to_line()).map_err(Error::from)?;
    } else {
        write!(w, "{}", report.to_text()).map_err(Error::from)?;
    }
    w.flush().map_err(Error::from)?;
    Ok(())
}

fn cmd_sample(a: &SampleArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let episode_cfg = episode_config(&a.episode, a.data.seed, "sample-episodes")?;
    let corpus = load_corpus("corpus", &a.data.corpus, &a.data.o_tag)?;
    let mut st = SamplerState::new();
    let mut lines = Vec::with_capacity(a.count);
    for _ in 0..a.count {
        let ep = sample_episode(&corpus, &episode_cfg, &mut st)?;
        lines.push(episode_to_line(&ep, &episode_cfg, corpus.label_set())?);
    }
    let mut w = open_output(&a.out, out)?;
    for l in lines {
        writeln!(w, "{l}").map_err(Error::from)?;
    }
    w.flush().map_err(Error::from)?;
    Ok(())
}

fn cmd_export(a: &ExportArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let cfg = a.model.train_config(TrainConfig::default().epochs)?;
    let corpus = load_corpus("corpus", &a.data.corpus, &a.data.o_tag)?;
    let provider = load_provider(&a.data)?;
    let params = load_checkpoint(&a.checkpoint)?;

    let (episode, k_shots) = match &a.episode_file {
        Some(path) => {
            require_file("episode-file", path)?;
            let file = BufReader::new(File::open(path).map_err(Error::from)?);
            let mut first = None;
            for line in file.lines() {
                let line = line.map_err(Error::from)?;
                if !line.trim().is_empty() {
                    first = Some(line);
                    break;
                }
            }
            match first {
                Some(line) => {
                    let (ep, ecfg) = episode_from_line(&line, corpus.label_set())?;
                    (Some(ep), ecfg.k_shots())
                }
                None => (None, a.episode.k_shots),
            }
        }
        None => {
            let ecfg = episode_config(&a.episode, a.data.seed, "export-episodes")?;
            let ep = sample_episode(&corpus, &ecfg, &mut SamplerState::at(a.episode_index))?;
            (Some(ep), ecfg.k_shots())
        }
    };

    let w = open_output(&a.out, out)?;
    let mut csv = csv::Writer::from_writer(w);
    let width = params.shape().hidden2;
    let mut header = vec!["kind".to_string(), "slot".into(), "label".into()];
    header.extend((0..width).map(|i| format!("dim_{i}")));
    csv.write_record(&header).map_err(csv_error)?;

    if let Some(episode) = episode {
        let inputs = prepare_episode(&episode, provider.as_ref())?;
        let adapted = adapt_episode(&params, &inputs, k_shots, &cfg)?;
        let labels = corpus.label_set();
        let name = |slot: usize| labels.name_of(episode.types()[slot]).unwrap_or_default().to_string();
        for (slot, row) in adapted.regions.centers().rows().into_iter().enumerate() {
            let mut rec = vec!["prototype".to_string(), slot.to_string(), name(slot)];
            rec.extend(row.iter().map(|v| v.to_string()));
            csv.write_record(&rec).map_err(csv_error)?;
        }
        for (row, gold) in adapted.query_mapped.rows().into_iter().zip(&inputs.query.labels) {
            let (slot, label) = match gold {
                Some(s) => (s.to_string(), name(*s)),
                None => (String::new(), labels.o_label().to_string()),
            };
            let mut rec = vec!["query".to_string(), slot, label];
            rec.extend(row.iter().map(|v| v.to_string()));
            csv.write_record(&rec).map_err(csv_error)?;
        }
    }
    csv.flush().map_err(Error::from)?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        message: format!("csv: {e}"),
    }
}
