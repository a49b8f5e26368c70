//! The `dialeval` command line.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::botkit::{self, train_markov, BotHandle, EchoBot, MarkovBot, RetrievalBot};
use crate::corpus::{self, Corpus, RawComment};
use crate::domain::{BotId, Conversation, RatingRecord};
use crate::embeddings::{
    tokenize, DeterministicProvider, EmbeddingKind, EmbeddingProvider, RemoteProvider, SidecarProvider, WordVectorTable,
};
use crate::evalserver::{self, EvalService, ServerOptions};
use crate::hybrid::{self, stats, CorrelationMethod, HybridModel, LabeledExample};
use crate::io::{read_jsonl, write_jsonl};
use crate::metrics::{EmojiWeights, FeatureExtractor, MetricVector, Pairing, FEATURE_NAMES};
use crate::report;
use crate::selfplay::{self, SelfPlayConfig};

#[derive(Debug, Parser)]
#[command(name = "dialeval", version, about = "Evaluate open-domain dialog agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build conversations from comment threads
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Conversation-level metrics
    #[command(subcommand)]
    Metrics(MetricsCmd),
    /// Fit the hybrid quality model
    #[command(subcommand)]
    Hybrid(HybridCmd),
    /// Correlations between metrics and ratings
    #[command(subcommand)]
    Stats(StatsCmd),
    /// Bot-bot conversations
    #[command(subcommand)]
    Selfplay(SelfplayCmd),
    /// Serve a bot over HTTP
    #[command(subcommand)]
    Bot(BotCmd),
    /// Interactive evaluation server
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Per-turn trajectory summaries
    #[command(subcommand)]
    Report(ReportCmd),
    /// Re-run the command recorded in a manifest
    Rerun { manifest: PathBuf },
}

#[derive(Debug, Subcommand)]
enum CorpusCmd {
    /// Extract alternating conversations from a comment JSONL dump
    Extract {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        min_turns: usize,
        /// Also write (context, target) pairs whose context has this many tokens
        #[arg(long, default_value_t = 10)]
        min_tokens: usize,
        #[arg(long)]
        contexts_out: Option<PathBuf>,
    },
    /// Print conversation count, median length and vocabulary size
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args, Serialize)]
struct EmbedOpts {
    /// Word vector file, or `deterministic[:DIM]`
    #[arg(long, default_value = "deterministic")]
    word_vectors: String,
    /// `deterministic`, `sidecar:PATH` or an embedding service URL
    #[arg(long, default_value = "deterministic")]
    sentence: String,
    /// `deterministic`, `sidecar:PATH` or an embedding service URL
    #[arg(long, default_value = "deterministic")]
    emotion: String,
    /// 64 whitespace-separated emoji weights
    #[arg(long)]
    emoji_weights: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    embed_timeout_secs: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum PairingArg {
    UserBot,
    BotBot,
}

impl From<PairingArg> for Pairing {
    fn from(p: PairingArg) -> Self {
        match p {
            PairingArg::UserBot => Pairing::UserBot,
            PairingArg::BotBot => Pairing::BotBot,
        }
    }
}

#[derive(Debug, Subcommand)]
enum MetricsCmd {
    /// Write one row of metrics per conversation
    Compute {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "user-bot")]
        pairing: PairingArg,
        #[command(flatten)]
        embed: EmbedOpts,
    },
}

#[derive(Debug, Subcommand)]
enum HybridCmd {
    /// Fit one model with a bot held out
    Fit {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        held_out: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit every leave-bot-out fold and summarize the coefficients
    Report {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MethodArg {
    Pearson,
    Spearman,
    Kendall,
}

impl From<MethodArg> for CorrelationMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Pearson => CorrelationMethod::Pearson,
            MethodArg::Spearman => CorrelationMethod::Spearman,
            MethodArg::Kendall => CorrelationMethod::Kendall,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum Level {
    Conversation,
    Bot,
}

#[derive(Debug, Subcommand)]
enum StatsCmd {
    /// Metric by rating-dimension correlation matrix
    Correlate {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long, value_enum, default_value = "pearson")]
        method: MethodArg,
        #[arg(long, value_enum, default_value = "conversation")]
        level: Level,
        /// Z-score each annotator's ratings first, dropping annotators with fewer than --min-count ratings
        #[arg(long)]
        normalize: bool,
        #[arg(long, default_value_t = hybrid::MIN_ANNOTATOR_RATINGS)]
        min_count: usize,
        /// Self-play summary CSV from `selfplay score`; adds an `mh_selfplay` row (bot level only)
        #[arg(long)]
        selfplay_scores: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args, Serialize)]
struct BotOpts {
    /// Bot server URL, or `builtin:echo`, `builtin:markov`, `builtin:retrieval`
    #[arg(long)]
    bot: String,
    /// Override the bot identity (`name@dataset/variant`)
    #[arg(long)]
    bot_id: Option<String>,
    /// Training conversations for builtin markov and retrieval bots
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    order: usize,
    /// Probability of answering with a fixed canned reply (builtin markov)
    #[arg(long, default_value_t = 0.0)]
    degrade: f64,
    /// Word vectors for the builtin retrieval bot, or `deterministic[:DIM]`
    #[arg(long, default_value = "deterministic")]
    bot_word_vectors: String,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
}

#[derive(Debug, Subcommand)]
enum SelfplayCmd {
    /// Generate bot-bot conversations
    Run {
        #[command(flatten)]
        bot: BotOpts,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        turns: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// One opener prompt per line
        #[arg(long)]
        openers: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score conversations with a held-out hybrid model
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-conversation scores
        #[arg(long)]
        per_conversation: Option<PathBuf>,
        #[command(flatten)]
        embed: EmbedOpts,
    },
    /// Repeated runs of consecutive utterances between conversations or against training data
    Overlap {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        window: usize,
        #[arg(long)]
        training: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum BotCmd {
    /// Serve `/info` and `/respond`
    Serve {
        #[command(flatten)]
        bot: BotOpts,
        #[arg(long, default_value = "127.0.0.1:8700")]
        bind: String,
    },
}

#[derive(Debug, Subcommand)]
enum EvalCmd {
    /// Serve the evaluation REST API
    Serve {
        /// Bot server URL or builtin spec; repeat for several bots
        #[arg(long = "bot", required = true)]
        bots: Vec<String>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        order: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 30)]
        timeout_secs: u64,
        #[arg(long, env = "EVAL_STORE_PATH", default_value = "eval_events.jsonl")]
        store: PathBuf,
        #[arg(long, env = "EVAL_BIND_ADDR", default_value = "127.0.0.1:8800")]
        bind: String,
        /// Directory with the web client bundle
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum ReportCmd {
    /// Per-turn means and 90% intervals of votes, word counts, sentiment, laughter and word coherence
    Trajectories {
        #[arg(long)]
        conversations: PathBuf,
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 100)]
        top_n: usize,
        #[arg(long, default_value_t = 100)]
        bottom_n: usize,
        #[command(flatten)]
        embed: EmbedOpts,
    },
}

/// Written beside every command's primary output as `<output>.manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name.
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub started_at: String,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn path_for(output: &Path) -> PathBuf {
        let mut s = output.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

struct Run {
    args: Vec<String>,
    started: Instant,
    started_at: String,
}

impl Run {
    fn manifest(&self, command: &str, config: serde_json::Value, seed: Option<u64>, inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
        let Some(primary) = outputs.first() else { return Ok(()) };
        let manifest = RunManifest {
            command: command.to_string(),
            args: self.args.clone(),
            config,
            seed,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started_at.clone(),
            wall_time_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = RunManifest::path_for(primary);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

/// Runs the command line and returns the process exit code:
/// 0 on success, 1 on runtime errors, 2 on usage errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let run = Run {
        args: argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
        started: Instant::now(),
        started_at: chrono::Utc::now().to_rfc3339(),
    };
    match dispatch(cli.command, &run) {
        Ok(()) => 0,
        Err(e) => {
            let chain: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
            eprintln!("{}", json!({"error": e.to_string(), "causes": chain}));
            1
        }
    }
}

fn dispatch(command: Command, run: &Run) -> Result<()> {
    match command {
        Command::Corpus(c) => corpus_cmd(c, run),
        Command::Metrics(c) => metrics_cmd(c, run),
        Command::Hybrid(c) => hybrid_cmd(c, run),
        Command::Stats(c) => stats_cmd(c, run),
        Command::Selfplay(c) => selfplay_cmd(c, run),
        Command::Bot(c) => bot_cmd(c),
        Command::Eval(c) => eval_cmd(c, run),
        Command::Report(c) => report_cmd(c, run),
        Command::Rerun { manifest } => {
            let m = RunManifest::load(&manifest)?;
            let argv = std::iter::once("dialeval".to_string()).chain(m.args);
            match self::run(argv.collect::<Vec<_>>()) {
                0 => Ok(()),
                code => bail!("rerun of `{}` exited with {code}", m.command),
            }
        }
    }
}

fn load_conversations(path: &Path) -> Result<Vec<Conversation>> {
    read_jsonl(path).with_context(|| format!("loading conversations from {}", path.display()))
}

fn load_ratings(path: &Path) -> Result<Vec<RatingRecord>> {
    read_jsonl(path).with_context(|| format!("loading ratings from {}", path.display()))
}

fn corpus_cmd(cmd: CorpusCmd, run: &Run) -> Result<()> {
    match cmd {
        CorpusCmd::Extract {
            input,
            out,
            min_turns,
            min_tokens,
            contexts_out,
        } => {
            let comments: Vec<RawComment> = read_jsonl(&input)?;
            let conversations = corpus::extract_conversations(comments, min_turns)?;
            write_jsonl(&out, &conversations)?;
            let mut outputs = vec![out.as_path()];
            if let Some(path) = &contexts_out {
                let corpus = Corpus::new("extract", conversations.clone());
                let rows: Vec<serde_json::Value> = corpus::filter_contexts(&corpus, min_tokens, true)
                    .into_iter()
                    .map(|p| {
                        json!({
                            "conversation_id": p.conversation_id,
                            "context": p.context.iter().map(|u| &u.text).collect::<Vec<_>>(),
                            "target": p.target.text,
                        })
                    })
                    .collect();
                write_jsonl(path, &rows)?;
                outputs.push(path.as_path());
            }
            log::info!("extracted {} conversations", conversations.len());
            run.manifest(
                "corpus extract",
                json!({"min_turns": min_turns, "min_tokens": min_tokens}),
                None,
                &[&input],
                &outputs,
            )
        }
        CorpusCmd::Stats { input, out } => {
            let stats = corpus::corpus_stats(&Corpus::load(&input)?)?;
            let text = serde_json::to_string_pretty(&stats)?;
            match &out {
                Some(path) => {
                    std::fs::write(path, text + "\n")?;
                    run.manifest("corpus stats", json!({}), None, &[&input], &[path])
                }
                None => {
                    println!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn provider(spec: &str, kind: EmbeddingKind, timeout: Duration) -> Result<Arc<dyn EmbeddingProvider>> {
    if spec == "deterministic" {
        return Ok(match kind {
            EmbeddingKind::Emotion => Arc::new(DeterministicProvider::emotion()),
            _ => Arc::new(DeterministicProvider::sentence()),
        });
    }
    if let Some(path) = spec.strip_prefix("sidecar:") {
        return Ok(Arc::new(SidecarProvider::load(path, kind).with_context(|| format!("loading sidecar {path}"))?));
    }
    if spec.starts_with("http://") || spec.starts_with("https://") {
        return Ok(Arc::new(RemoteProvider::new(spec, kind, timeout)));
    }
    bail!("unknown embedding source `{spec}`")
}

fn word_table<'a>(spec: &str, texts: impl Iterator<Item = &'a str>) -> Result<WordVectorTable> {
    if let Some(rest) = spec.strip_prefix("deterministic") {
        let dim = match rest.strip_prefix(':') {
            Some(d) => d.parse().with_context(|| format!("bad dimension in `{spec}`"))?,
            None if rest.is_empty() => 32,
            None => bail!("unknown word vector source `{spec}`"),
        };
        let vocab: BTreeSet<String> = texts.flat_map(tokenize).collect();
        return Ok(WordVectorTable::deterministic(vocab.iter().map(String::as_str), dim));
    }
    WordVectorTable::load(spec).with_context(|| format!("loading word vectors from {spec}"))
}

fn extractor<'a>(opts: &EmbedOpts, texts: impl Iterator<Item = &'a str>) -> Result<FeatureExtractor> {
    let timeout = Duration::from_secs(opts.embed_timeout_secs);
    let mut fx = FeatureExtractor::new(
        Arc::new(word_table(&opts.word_vectors, texts)?),
        provider(&opts.sentence, EmbeddingKind::Sentence, timeout)?,
        provider(&opts.emotion, EmbeddingKind::Emotion, timeout)?,
    );
    if let Some(path) = &opts.emoji_weights {
        fx = fx.with_weights(EmojiWeights::load(path).with_context(|| format!("loading {}", path.display()))?);
    }
    Ok(fx)
}

/// One row of a metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub conversation_id: String,
    pub bot_id: BotId,
    pub features: MetricVector,
}

pub fn write_features(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["conversation_id", "bot_id"];
    header.extend(FEATURE_NAMES);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.conversation_id.clone(), r.bot_id.to_string()];
        rec.extend(r.features.csv_cells());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let expected: Vec<&str> = ["conversation_id", "bot_id"].into_iter().chain(FEATURE_NAMES).collect();
    if header != expected {
        bail!("{}: unexpected header {:?}", path.display(), header);
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec?;
            let cells: Vec<&str> = rec.iter().collect();
            Ok(FeatureRow {
                conversation_id: cells[0].to_string(),
                bot_id: cells[1].parse().map_err(|e| anyhow!("{}:{}: {e}", path.display(), i + 2))?,
                features: MetricVector::from_csv_cells(&cells[2..]).map_err(|e| anyhow!("{}:{}: {e}", path.display(), i + 2))?,
            })
        })
        .collect()
}

fn metrics_cmd(cmd: MetricsCmd, run: &Run) -> Result<()> {
    let MetricsCmd::Compute {
        input,
        out,
        pairing,
        embed,
    } = cmd;
    let conversations = load_conversations(&input)?;
    let fx = extractor(&embed, conversations.iter().flat_map(|c| c.texts()))?;
    let pairing: Pairing = pairing.into();
    let mut rows = Vec::new();
    for c in &conversations {
        match fx.conversation_features(c, pairing) {
            Ok(features) => rows.push(FeatureRow {
                conversation_id: c.id.clone(),
                bot_id: c.bot_id.clone(),
                features,
            }),
            Err(crate::metrics::MetricError::InsufficientTurns) => log::warn!("skipping {}: too few turns", c.id),
            Err(e) => return Err(anyhow!(e).context(format!("conversation {}", c.id))),
        }
    }
    write_features(&out, &rows)?;
    run.manifest(
        "metrics compute",
        json!({"pairing": pairing.to_string(), "embeddings": embed}),
        None,
        &[&input],
        &[&out],
    )
}

fn labeled_examples(features: &[FeatureRow], ratings: &[RatingRecord]) -> Vec<LabeledExample> {
    let labels = hybrid::quality_labels(ratings);
    features
        .iter()
        .filter_map(|r| {
            labels.get(&r.conversation_id).map(|q| LabeledExample {
                bot_id: r.bot_id.clone(),
                features: r.features,
                quality: *q,
            })
        })
        .collect()
}

fn hybrid_cmd(cmd: HybridCmd, run: &Run) -> Result<()> {
    match cmd {
        HybridCmd::Fit {
            features,
            ratings,
            held_out,
            out,
        } => {
            let held: BotId = held_out.parse()?;
            let examples = labeled_examples(&read_features(&features)?, &load_ratings(&ratings)?);
            let model = hybrid::fit_hybrid(&examples, &held)?;
            model.save(&out)?;
            run.manifest(
                "hybrid fit",
                json!({"held_out": held.to_string()}),
                None,
                &[&features, &ratings],
                &[&out],
            )
        }
        HybridCmd::Report {
            features,
            ratings,
            out_dir,
        } => {
            let examples = labeled_examples(&read_features(&features)?, &load_ratings(&ratings)?);
            let report = hybrid::leave_bot_out_report(&examples)?;
            std::fs::create_dir_all(&out_dir)?;
            let lambdas = out_dir.join("lambdas.csv");
            let mut w = csv::Writer::from_path(&lambdas)?;
            w.write_record(["feature", "mean", "ci_low", "ci_high"])?;
            for s in &report.lambdas {
                w.write_record([s.feature.clone(), s.mean.to_string(), s.ci_low.to_string(), s.ci_high.to_string()])?;
            }
            w.flush()?;
            let models = out_dir.join("models.json");
            std::fs::write(&models, serde_json::to_string_pretty(&report.models)? + "\n")?;
            run.manifest("hybrid report", json!({}), None, &[&features, &ratings], &[&lambdas, &models])
        }
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean rating per conversation for each dimension.
fn rating_targets(ratings: &[RatingRecord], normalize: bool, min_count: usize) -> BTreeMap<String, [f64; 5]> {
    let rows: Vec<(String, [f64; 5])> = if normalize {
        hybrid::normalize_ratings(ratings, min_count)
            .into_iter()
            .map(|r| (r.conversation_id.clone(), r.as_array()))
            .collect()
    } else {
        ratings
            .iter()
            .map(|r| (r.conversation_id.clone(), r.scores.as_array().map(f64::from)))
            .collect()
    };
    let mut grouped: BTreeMap<String, Vec<[f64; 5]>> = BTreeMap::new();
    for (id, s) in rows {
        grouped.entry(id).or_default().push(s);
    }
    grouped
        .into_iter()
        .map(|(id, v)| {
            let mut m = [0.0; 5];
            for (d, slot) in m.iter_mut().enumerate() {
                *slot = mean(&v.iter().map(|s| s[d]).collect::<Vec<_>>());
            }
            (id, m)
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct ScoreRow {
    bot_id: String,
    mean_mh: f64,
}

#[allow(clippy::too_many_arguments)]
fn stats_cmd(cmd: StatsCmd, run: &Run) -> Result<()> {
    let StatsCmd::Correlate {
        features,
        ratings,
        method,
        level,
        normalize,
        min_count,
        selfplay_scores,
        out,
    } = cmd;
    let rows = read_features(&features)?;
    let targets = rating_targets(&load_ratings(&ratings)?, normalize, min_count);
    // (unit id, metric values, rating values)
    let mut units: Vec<(String, [Option<f64>; 11], [f64; 5])> = Vec::new();
    let joined: Vec<(&FeatureRow, [f64; 5])> = rows.iter().filter_map(|r| targets.get(&r.conversation_id).map(|t| (r, *t))).collect();
    match level {
        Level::Conversation => {
            for (r, t) in &joined {
                units.push((r.conversation_id.clone(), r.features.to_array(), *t));
            }
        }
        Level::Bot => {
            let mut by_bot: BTreeMap<String, Vec<(&FeatureRow, [f64; 5])>> = BTreeMap::new();
            for (r, t) in &joined {
                by_bot.entry(r.bot_id.to_string()).or_default().push((r, *t));
            }
            for (bot, items) in by_bot {
                let mut f = [None; 11];
                for (i, slot) in f.iter_mut().enumerate() {
                    let present: Vec<f64> = items.iter().filter_map(|(r, _)| r.features.to_array()[i]).collect();
                    if !present.is_empty() {
                        *slot = Some(mean(&present));
                    }
                }
                let mut t = [0.0; 5];
                for (d, slot) in t.iter_mut().enumerate() {
                    *slot = mean(&items.iter().map(|(_, s)| s[d]).collect::<Vec<_>>());
                }
                units.push((bot, f, t));
            }
        }
    }
    let mut metric_rows: Vec<(String, Vec<Option<f64>>)> = FEATURE_NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| (n.to_string(), units.iter().map(|u| u.1[i]).collect()))
        .collect();
    let mut inputs = vec![features.as_path(), ratings.as_path()];
    if let Some(path) = &selfplay_scores {
        if level != Level::Bot {
            bail!("--selfplay-scores requires --level bot");
        }
        let mut r = csv::Reader::from_path(path)?;
        let scores: BTreeMap<String, f64> = r
            .deserialize::<ScoreRow>()
            .map(|row| row.map(|s| (s.bot_id, s.mean_mh)))
            .collect::<Result<_, _>>()?;
        metric_rows.push(("mh_selfplay".into(), units.iter().map(|u| scores.get(&u.0).copied()).collect()));
        inputs.push(path);
    }
    let method: CorrelationMethod = method.into();
    let mut w = csv::Writer::from_path(&out)?;
    let mut header = vec!["metric".to_string(), "n".to_string()];
    header.extend(crate::domain::RATING_DIMENSIONS.iter().map(|d| d.to_string()));
    w.write_record(&header)?;
    for (name, values) in &metric_rows {
        let keep: Vec<usize> = (0..units.len()).filter(|&i| values[i].is_some()).collect();
        let x: Vec<f64> = keep.iter().map(|&i| values[i].expect("kept")).collect();
        let mut rec = vec![name.clone(), x.len().to_string()];
        for d in 0..5 {
            let y: Vec<f64> = keep.iter().map(|&i| units[i].2[d]).collect();
            rec.push(stats::correlate(method, &x, &y).map(|r| r.to_string()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    run.manifest(
        "stats correlate",
        json!({"method": method, "level": level, "normalize": normalize, "min_count": min_count}),
        None,
        &inputs,
        &[&out],
    )
}

fn builtin_bot(spec: &str, opts: &BotOpts) -> Result<BotHandle> {
    let corpus = || -> Result<Corpus> {
        let path = opts.corpus.as_ref().ok_or_else(|| anyhow!("{spec} needs --corpus"))?;
        Ok(Corpus::load(path)?)
    };
    let (default_id, bot): (BotId, Arc<dyn botkit::Bot>) = match spec {
        "builtin:echo" => (BotId::new("echo", "none", "baseline"), Arc::new(EchoBot)),
        "builtin:markov" => {
            let c = corpus()?;
            let model = train_markov(c.conversations().iter().flat_map(|conv| conv.texts()), opts.order)?;
            (
                BotId::new(format!("markov-d{}", opts.degrade), c.name.clone(), "baseline"),
                Arc::new(MarkovBot::new(model).with_degrade(opts.degrade)),
            )
        }
        "builtin:retrieval" => {
            let c = corpus()?;
            let table = word_table(&opts.bot_word_vectors, c.conversations().iter().flat_map(|conv| conv.texts()))?;
            (
                BotId::new("retrieval", c.name.clone(), "baseline"),
                Arc::new(RetrievalBot::from_corpus(&c, Arc::new(table))?),
            )
        }
        other => bail!("unknown bot `{other}`"),
    };
    let id = match &opts.bot_id {
        Some(s) => s.parse()?,
        None => default_id,
    };
    let mut handle = BotHandle::in_process(id, bot).with_temperature(opts.temperature);
    handle.timeout = Duration::from_secs(opts.timeout_secs);
    Ok(handle)
}

fn bot_handle(opts: &BotOpts) -> Result<BotHandle> {
    if opts.bot.starts_with("http://") || opts.bot.starts_with("https://") {
        let mut h = BotHandle::connect(&opts.bot, Duration::from_secs(opts.timeout_secs))?.with_temperature(opts.temperature);
        if let Some(id) = &opts.bot_id {
            h.bot_id = id.parse()?;
        }
        return Ok(h);
    }
    builtin_bot(&opts.bot, opts)
}

fn read_openers(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

fn selfplay_cmd(cmd: SelfplayCmd, run: &Run) -> Result<()> {
    match cmd {
        SelfplayCmd::Run {
            bot,
            n,
            turns,
            seed,
            openers,
            out,
        } => {
            let handle = bot_handle(&bot)?;
            let config = SelfPlayConfig {
                n_conversations: n,
                turns,
                seed,
                opener_prompts: match &openers {
                    Some(p) => read_openers(p)?,
                    None => SelfPlayConfig::default().opener_prompts,
                },
            };
            let conversations = selfplay::run_selfplay(&handle, &config)?;
            write_jsonl(&out, &conversations)?;
            let mut inputs: Vec<&Path> = openers.iter().map(PathBuf::as_path).collect();
            inputs.extend(bot.corpus.as_deref());
            run.manifest(
                "selfplay run",
                json!({"bot": bot, "bot_id": handle.bot_id.to_string(), "selfplay": config}),
                Some(seed),
                &inputs,
                &[&out],
            )
        }
        SelfplayCmd::Score {
            model,
            input,
            out,
            per_conversation,
            embed,
        } => {
            let m = HybridModel::load(&model)?;
            let conversations = load_conversations(&input)?;
            let fx = extractor(&embed, conversations.iter().flat_map(|c| c.texts()))?;
            let score = selfplay::score_selfplay(&conversations, &m, &fx)?;
            let mut w = csv::Writer::from_path(&out)?;
            w.write_record(["bot_id", "n_conversations", "mean_mh"])?;
            w.write_record([
                score.bot_id.to_string(),
                score.per_conversation_mh.len().to_string(),
                score.mean_mh.to_string(),
            ])?;
            w.flush()?;
            let mut outputs = vec![out.as_path()];
            if let Some(path) = &per_conversation {
                let mut w = csv::Writer::from_path(path)?;
                w.write_record(["conversation_id", "mh"])?;
                for (c, mh) in conversations.iter().zip(&score.per_conversation_mh) {
                    w.write_record([c.id.clone(), mh.to_string()])?;
                }
                w.flush()?;
                outputs.push(path);
            }
            run.manifest("selfplay score", json!({"embeddings": embed}), None, &[&model, &input], &outputs)
        }
        SelfplayCmd::Overlap {
            input,
            window,
            training,
            out,
        } => {
            let conversations = load_conversations(&input)?;
            let (mode, percent) = match &training {
                Some(path) => ("training", selfplay::training_overlap(&conversations, &Corpus::load(path)?, window)?),
                None => ("pairwise", selfplay::pairwise_overlap(&conversations, window)?),
            };
            let result = json!({"mode": mode, "window": window, "percent": percent, "conversations": conversations.len()});
            println!("{result}");
            if let Some(path) = &out {
                std::fs::write(path, result.to_string() + "\n")?;
                let mut inputs = vec![input.as_path()];
                inputs.extend(training.as_deref());
                run.manifest("selfplay overlap", json!({"window": window, "mode": mode}), None, &inputs, &[path])?;
            }
            Ok(())
        }
    }
}

fn bot_cmd(cmd: BotCmd) -> Result<()> {
    let BotCmd::Serve { bot, bind } = cmd;
    let handle = bot_handle(&bot)?;
    let botkit::Transport::InProcess(inner) = handle.transport.clone() else {
        bail!("bot serve needs a builtin bot");
    };
    let listener = std::net::TcpListener::bind(&bind).with_context(|| format!("binding {bind}"))?;
    let server = botkit::serve_bot(
        inner,
        handle.bot_id.clone(),
        listener,
        botkit::BotServerConfig {
            timeout: handle.timeout,
        },
    )?;
    eprintln!("serving {} on {}", handle.bot_id, server.url());
    server.wait_for_ctrl_c()?;
    Ok(())
}

fn eval_cmd(cmd: EvalCmd, run: &Run) -> Result<()> {
    let EvalCmd::Serve {
        bots,
        corpus,
        order,
        temperature,
        timeout_secs,
        store,
        bind,
        static_dir,
    } = cmd;
    let handles = bots
        .iter()
        .map(|spec| {
            bot_handle(&BotOpts {
                bot: spec.clone(),
                bot_id: None,
                corpus: corpus.clone(),
                order,
                degrade: 0.0,
                bot_word_vectors: "deterministic".into(),
                temperature,
                timeout_secs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let service = Arc::new(EvalService::open(handles, &store)?);
    let listener = std::net::TcpListener::bind(&bind).with_context(|| format!("binding {bind}"))?;
    let server = evalserver::serve(service, listener, &ServerOptions { static_dir })?;
    run.manifest(
        "eval serve",
        json!({"bots": bots, "bind": server.local_addr().to_string()}),
        None,
        &[],
        &[&store],
    )?;
    eprintln!("evaluation server on {}", server.url());
    server.wait_for_ctrl_c()?;
    Ok(())
}

fn report_cmd(cmd: ReportCmd, run: &Run) -> Result<()> {
    let ReportCmd::Trajectories {
        conversations,
        ratings,
        out_dir,
        top_n,
        bottom_n,
        embed,
    } = cmd;
    let convs = load_conversations(&conversations)?;
    let labels = hybrid::quality_labels(&load_ratings(&ratings)?);
    let fx = extractor(&embed, convs.iter().flat_map(|c| c.texts()))?;
    let (top, bottom) = report::quality_groups(&convs, &labels, top_n, bottom_n);
    let (ei, baseline) = report::variant_groups(&convs);
    std::fs::create_dir_all(&out_dir)?;
    let mut outputs = Vec::new();
    for (name, group) in [("top", top), ("bottom", bottom), ("ei", ei), ("baseline", baseline)] {
        let trajectories = group.iter().map(|c| report::turn_values(c, &fx)).collect::<Result<Vec<_>, _>>()?;
        let path = out_dir.join(format!("{name}.csv"));
        report::write_summary_csv(&path, &report::summarize(&trajectories))?;
        outputs.push(path);
    }
    let outs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    run.manifest(
        "report trajectories",
        json!({"top_n": top_n, "bottom_n": bottom_n, "embeddings": embed}),
        None,
        &[&conversations, &ratings],
        &outs,
    )
}
