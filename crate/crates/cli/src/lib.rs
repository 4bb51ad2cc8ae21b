//! Command-line surface for the `cva` tool.
//!
//! Settings resolve as flags, then environment variables, then the file
//! given with `--config`.

use std::ffi::OsString;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use cva::corpus::{self, Corpus};
use cva::embedding::{
    EmbeddingBackend, GlossaryStrategy, MetadataStrategy, RemoteEmbedder, RemoteEmbedderConfig, TrigramEmbedder,
    EMBED_API_KEY_ENV,
};
use cva::eval::{self, SweepConfig, SweepMode};
use cva::http::HttpSettings;
use cva::llm::{run_matching, ChatEndpoint, GlossaryScope, LlmRunConfig, Round, RunOutcome, LLM_API_KEY_ENV};
use cva::manifest::RunManifest;
use cva::mock::{serve_mock_llm, MockScript};
use cva::partition::{self, ShardPlan};
use cva::ranker;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const DEFAULT_SEED: u64 = 17;

#[derive(Debug, Parser)]
#[command(name = "cva", version, about = "Map dataless table column metadata onto a controlled vocabulary")]
pub struct Cli {
    /// Seed for every random choice (k-means, mock endpoint).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML settings file. For `sweep` this is the sweep definition.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log filter, e.g. `info` or `cva=debug`.
    #[arg(long, global = true, env = "CVA_LOG", default_value = "warn")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate raw metadata, glossary and ground truth into a corpus directory.
    Ingest {
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        glossary: PathBuf,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split the glossary into topic shards and route columns to them.
    Shard {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        n: usize,
        #[command(flatten)]
        embed: EmbedArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank glossary entries for each column by embedding similarity.
    Rank {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "label")]
        meta_strategy: MetadataStrategy,
        #[arg(long, default_value = "label")]
        gloss_strategy: GlossaryStrategy,
        #[command(flatten)]
        embed: EmbedArgs,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ask a chat model to match columns against the glossary.
    LlmMatch {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 0.5)]
        temperature: f64,
        #[arg(long, default_value_t = 25)]
        batch_size: usize,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        #[arg(long, default_value = "1")]
        round: Round,
        /// Directory written by `cva shard`; each batch then sees one shard.
        #[arg(long)]
        shards: Option<PathBuf>,
        #[command(flatten)]
        llm: LlmArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a mappings file with hit@1 and hit@5.
    Eval {
        #[arg(long)]
        mappings: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
    },
    /// Run a model x temperature (or embedding strategy) grid.
    Sweep {
        #[command(flatten)]
        llm: LlmArgs,
        #[command(flatten)]
        embed: EmbedArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the scripted chat-completions endpoint until interrupted.
    MockLlm {
        #[arg(long, default_value_t = 8089)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// e.g. `echo-valid-mapping,gemma-7b=fail-rate(1.0)`.
        #[arg(long, default_value = "echo-valid-mapping")]
        script: String,
    },
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// `local` or `remote`.
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long, env = "CVA_EMBED_URL")]
    pub embed_url: Option<String>,
    #[arg(long)]
    pub embed_model: Option<String>,
}

#[derive(Debug, Args)]
pub struct LlmArgs {
    #[arg(long, env = "CVA_LLM_URL")]
    pub llm_url: Option<String>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Per-request timeout in seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
}

/// Optional defaults read from `--config` for every command but `sweep`.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub llm_url: Option<String>,
    pub max_retries: Option<u32>,
    pub timeout_secs: Option<f64>,
    pub max_in_flight: Option<usize>,
    pub backend: Option<String>,
    pub embed_url: Option<String>,
    pub embed_model: Option<String>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Failed(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Failed(e)
    }
}

impl From<corpus::CorpusError> for CliError {
    fn from(e: corpus::CorpusError) -> Self {
        CliError::Failed(e.into())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_tracing(&cli.log);
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return EXIT_FAILURE;
        }
    };
    match rt.block_on(run(cli)) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: invalid flag: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Failed(e)) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

fn init_tracing(filter: &str) {
    let filter = tracing_subscriber::EnvFilter::try_new(filter).unwrap_or_else(|_| "warn".into());
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn read_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).map_err(|e| usage(format!("--config {}: {e}", path.display())))
}

async fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Sweep { llm, embed, out } = &cli.command {
        return cmd_sweep(&cli, llm, embed, out).await;
    }
    let file = read_file_config(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    match cli.command {
        Command::Ingest {
            metadata,
            glossary,
            ground_truth,
            out,
        } => cmd_ingest(&metadata, &glossary, ground_truth.as_deref(), &out),
        Command::Shard { corpus, n, embed, out } => cmd_shard(&corpus, n, seed, &embed, &file, &out).await,
        Command::Rank {
            corpus,
            meta_strategy,
            gloss_strategy,
            embed,
            k,
            cache_dir,
            out,
        } => {
            if k == 0 || k > ranker::MAX_MAPPINGS {
                return Err(usage(format!("--k must be between 1 and {}", ranker::MAX_MAPPINGS)));
            }
            cmd_rank(&corpus, meta_strategy, gloss_strategy, &embed, &file, k, cache_dir.as_deref(), &out).await
        }
        Command::LlmMatch {
            corpus,
            model,
            temperature,
            batch_size,
            repetitions,
            round,
            shards,
            llm,
            out,
        } => {
            let config = LlmRunConfig {
                model,
                temperature,
                batch_size,
                repetitions,
                max_retries: llm.max_retries.or(file.max_retries).unwrap_or(3),
                timeout: secs(llm.timeout.or(file.timeout_secs).unwrap_or(300.0))?,
                max_in_flight: llm.max_in_flight.or(file.max_in_flight).unwrap_or(4),
                ..LlmRunConfig::default()
            };
            config.validate().map_err(|e| usage(e.to_string()))?;
            let url = llm.llm_url.or(file.llm_url).ok_or_else(|| usage("--llm-url or CVA_LLM_URL is required"))?;
            cmd_llm_match(&corpus, &config, round, shards.as_deref(), &url, &out).await
        }
        Command::Eval { mappings, ground_truth } => cmd_eval(&mappings, &ground_truth),
        Command::MockLlm { port, host, script } => {
            let script = MockScript::parse(&script, seed).map_err(|e| usage(e.to_string()))?;
            let server = serve_mock_llm(SocketAddr::new(host, port), script)
                .await
                .map_err(anyhow::Error::from)?;
            println!("listening on {}", server.base_url());
            tokio::select! {
                _ = tokio::signal::ctrl_c() => Ok(()),
                _ = server.wait() => Err(anyhow::anyhow!("mock server stopped").into()),
            }
        }
        Command::Sweep { .. } => unreachable!("handled above"),
    }
}

fn secs(s: f64) -> Result<Duration, CliError> {
    Duration::try_from_secs_f64(s).map_err(|_| usage(format!("--timeout must be a positive number of seconds, got {s}")))
}

fn make_backend(
    backend: Option<&str>,
    embed_url: Option<String>,
    embed_model: Option<String>,
) -> Result<Box<dyn EmbeddingBackend>, CliError> {
    match backend.unwrap_or("local") {
        "local" => Ok(Box::new(TrigramEmbedder::new())),
        "remote" => {
            let base_url = embed_url.ok_or_else(|| usage("remote backend needs --embed-url or CVA_EMBED_URL"))?;
            let e = RemoteEmbedder::new(RemoteEmbedderConfig {
                base_url,
                model: embed_model.unwrap_or_else(|| "default".into()),
                api_key: std::env::var(EMBED_API_KEY_ENV).ok(),
                dim: None,
                http: HttpSettings::default(),
            })
            .map_err(anyhow::Error::from)?;
            Ok(Box::new(e))
        }
        other => Err(usage(format!("unknown backend `{other}` (expected local or remote)"))),
    }
}

fn backend_from(embed: &EmbedArgs, file: &FileConfig) -> Result<Box<dyn EmbeddingBackend>, CliError> {
    make_backend(
        embed.backend.as_deref().or(file.backend.as_deref()),
        embed.embed_url.clone().or_else(|| file.embed_url.clone()),
        embed.embed_model.clone().or_else(|| file.embed_model.clone()),
    )
}

fn load_corpus_dir(dir: &Path) -> Result<Corpus, CliError> {
    Corpus::load_dir(dir)
        .with_context(|| format!("loading corpus {}", dir.display()))
        .map_err(CliError::from)
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

fn cmd_ingest(metadata: &Path, glossary: &Path, ground_truth: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let targets = [corpus::COLUMNS_FILE, corpus::GLOSSARY_FILE, corpus::GROUND_TRUTH_FILE].map(|f| out.join(f));
    for input in [Some(metadata), Some(glossary), ground_truth].into_iter().flatten() {
        if targets.iter().any(|t| same_file(input, t)) {
            return Err(usage(format!("--out would overwrite input {}", input.display())));
        }
    }
    let mut manifest = RunManifest::start(
        "ingest",
        json!({"metadata": metadata, "glossary": glossary, "ground_truth": ground_truth, "out": out}),
        None,
    );
    for input in [Some(metadata), Some(glossary), ground_truth].into_iter().flatten() {
        manifest.add_input(input).context("hashing inputs")?;
    }
    let summary = corpus::ingest(metadata, glossary, ground_truth, out)?;
    for d in &summary.diagnostics {
        tracing::warn!("{d}");
    }
    for o in &summary.outputs {
        manifest.add_output(o);
    }
    manifest.config["counts"] = json!({
        "columns": summary.n_columns,
        "glossary": summary.n_glossary,
        "ground_truth": summary.n_ground_truth,
    });
    manifest.finish(out).context("writing manifest")?;
    println!(
        "{}",
        json!({"columns": summary.n_columns, "glossary": summary.n_glossary, "ground_truth": summary.n_ground_truth})
    );
    Ok(())
}

async fn cmd_shard(
    corpus_dir: &Path,
    n: usize,
    seed: u64,
    embed: &EmbedArgs,
    file: &FileConfig,
    out: &Path,
) -> Result<(), CliError> {
    let corpus = load_corpus_dir(corpus_dir)?;
    let backend = backend_from(embed, file)?;
    let mut manifest = RunManifest::start(
        "shard",
        json!({"corpus": corpus_dir, "n": n, "backend": backend.name(), "out": out}),
        Some(seed),
    );
    manifest.add_input(corpus_dir).context("hashing inputs")?;
    let mut plan = match partition::partition_glossary(&corpus.glossary, n, backend.as_ref(), seed).await {
        Err(e @ (partition::PartitionError::ZeroShards | partition::PartitionError::TooManyShards { .. })) => {
            return Err(usage(format!("--n: {e}")))
        }
        other => other.map_err(anyhow::Error::from)?,
    };
    plan.routing = partition::route_metadata(&corpus.columns, &plan, backend.as_ref())
        .await
        .map_err(anyhow::Error::from)?;
    let shards = partition::export_shards(&plan, &corpus.glossary, &corpus.columns, out).map_err(anyhow::Error::from)?;
    for f in shards.glossary_files.iter().chain(&shards.metadata_files) {
        manifest.add_output(out.join(f));
    }
    manifest.add_output(out.join(partition::SHARD_MANIFEST_FILE));
    manifest.finish(out).context("writing manifest")?;
    println!(
        "{}",
        json!({"shards": plan.n_shards, "iterations": plan.iterations, "glossary_sizes": shards.glossary_sizes})
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
async fn cmd_rank(
    corpus_dir: &Path,
    meta: MetadataStrategy,
    gloss: GlossaryStrategy,
    embed: &EmbedArgs,
    file: &FileConfig,
    k: usize,
    cache_dir: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let corpus = load_corpus_dir(corpus_dir)?;
    let backend = backend_from(embed, file)?;
    let mut manifest = RunManifest::start(
        "rank",
        json!({
            "corpus": corpus_dir, "meta_strategy": meta, "gloss_strategy": gloss,
            "backend": backend.name(), "k": k, "cache_dir": cache_dir, "out": out,
        }),
        None,
    );
    manifest.add_input(corpus_dir).context("hashing inputs")?;
    let mappings = ranker::rank_corpus(&corpus, meta, gloss, backend.as_ref(), k, cache_dir)
        .await
        .map_err(anyhow::Error::from)?;
    for p in ranker::write_mappings(out, &mappings)? {
        manifest.add_output(p);
    }
    manifest.finish(&parent_dir(out)).context("writing manifest")?;
    println!("{}", json!({"columns": mappings.len(), "out": out}));
    Ok(())
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn endpoint(url: &str) -> ChatEndpoint {
    ChatEndpoint {
        api_key: std::env::var(LLM_API_KEY_ENV).ok(),
        ..ChatEndpoint::new(url)
    }
}

async fn cmd_llm_match(
    corpus_dir: &Path,
    config: &LlmRunConfig,
    round: Round,
    shards: Option<&Path>,
    url: &str,
    out: &Path,
) -> Result<(), CliError> {
    let corpus = load_corpus_dir(corpus_dir)?;
    let plan: Option<ShardPlan> = match shards {
        Some(dir) => Some(partition::load_shard_plan(dir).map_err(anyhow::Error::from)?),
        None => None,
    };
    let scope = plan.as_ref().map_or(GlossaryScope::Full, GlossaryScope::Sharded);
    let mut manifest = RunManifest::start(
        "llm-match",
        json!({"corpus": corpus_dir, "run": config, "round": round, "shards": shards, "llm_url": url, "out": out}),
        None,
    );
    manifest.add_input(corpus_dir).context("hashing inputs")?;
    if let Some(dir) = shards {
        manifest.add_input(dir).context("hashing inputs")?;
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let outcomes = run_matching(&corpus, &endpoint(url), config, round, scope, Some(out)).await;
    let summary = write_outcomes(out, &outcomes, &mut manifest)?;
    manifest.finish(out).context("writing manifest")?;
    println!("{summary}");
    if outcomes.iter().all(RunOutcome::is_failed) {
        return Err(anyhow::anyhow!("every repetition failed").into());
    }
    Ok(())
}

fn write_outcomes(out: &Path, outcomes: &[RunOutcome], manifest: &mut RunManifest) -> Result<String, CliError> {
    let mut lines = String::new();
    for (i, o) in outcomes.iter().enumerate() {
        let line = match o {
            RunOutcome::Completed {
                mappings,
                unanswered,
                failed_batches,
                ..
            } => {
                let path = out.join(format!("rep_{i}.mappings.jsonl"));
                ranker::write_mappings(&path, mappings)?;
                manifest.add_output(&path);
                json!({"repetition": i, "status": "completed", "mappings": path, "answered": mappings.len(),
                       "unanswered": unanswered, "failed_batches": failed_batches})
            }
            RunOutcome::Failed { reason } => json!({"repetition": i, "status": "failed", "reason": reason}),
        };
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    let path = out.join("outcomes.jsonl");
    std::fs::write(&path, &lines).with_context(|| format!("writing {}", path.display()))?;
    manifest.add_output(&path);
    Ok(lines.trim_end().to_string())
}

fn cmd_eval(mappings: &Path, ground_truth: &Path) -> Result<(), CliError> {
    let m = ranker::read_mappings(mappings).with_context(|| format!("reading {}", mappings.display()))?;
    let gt = corpus::load_ground_truth(ground_truth).with_context(|| format!("reading {}", ground_truth.display()))?;
    let r = eval::evaluate_run(&m, &gt);
    for d in &r.diagnostics {
        tracing::warn!("{d}");
    }
    println!(
        "{}",
        json!({"h1": r.h1, "h5": r.h5, "hits1": r.hits1, "hits5": r.hits5, "n_columns": r.n_columns, "n_answered": r.n_answered})
    );
    Ok(())
}

async fn cmd_sweep(cli: &Cli, llm: &LlmArgs, embed: &EmbedArgs, out: &Path) -> Result<(), CliError> {
    let path = cli.config.as_deref().ok_or_else(|| usage("sweep needs --config <sweep.toml>"))?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = SweepConfig::from_toml(&text).map_err(|e| usage(format!("--config {}: {e}", path.display())))?;
    cfg.resolve_paths(&parent_dir(path));
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(u) = &llm.llm_url {
        cfg.llm_url = Some(u.clone());
    }
    if let Some(v) = llm.max_retries {
        cfg.max_retries = v;
    }
    if let Some(v) = llm.timeout {
        cfg.timeout_secs = v;
    }
    if let Some(v) = llm.max_in_flight {
        cfg.max_in_flight = v;
    }
    if let Some(b) = &embed.backend {
        cfg.backend = b.clone();
    }
    if let Some(u) = &embed.embed_url {
        cfg.embed_url = Some(u.clone());
    }
    if let Some(m) = &embed.embed_model {
        cfg.embed_model = Some(m.clone());
    }
    let seed = cfg.seed.unwrap_or(DEFAULT_SEED);

    let corpus = load_corpus_dir(&cfg.corpus)?;
    let gt = corpus::load_ground_truth(&cfg.ground_truth)
        .with_context(|| format!("reading {}", cfg.ground_truth.display()))?;
    let mut manifest = RunManifest::start("sweep", serde_json::to_value(&cfg).context("config snapshot")?, Some(seed));
    manifest.add_input(path).context("hashing inputs")?;
    manifest.add_input(&cfg.corpus).context("hashing inputs")?;
    manifest.add_input(&cfg.ground_truth).context("hashing inputs")?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let (jsonl, table) = match cfg.mode {
        SweepMode::Embedding => {
            let backend = make_backend(Some(&cfg.backend), cfg.embed_url.clone(), cfg.embed_model.clone())?;
            let report = eval::strategy_sweep(&corpus, &gt, backend.as_ref(), &cfg.combinations(), None)
                .await
                .map_err(anyhow::Error::from)?;
            (report.to_jsonl(), report.to_table())
        }
        SweepMode::Llm => {
            if cfg.models.is_empty() || cfg.temperatures.is_empty() {
                return Err(usage("llm sweep needs non-empty `models` and `temperatures`"));
            }
            for m in &cfg.models {
                for &t in &cfg.temperatures {
                    cfg.run_config(m, t).validate().map_err(|e| usage(e.to_string()))?;
                }
            }
            let url = cfg.llm_url.clone().ok_or_else(|| usage("--llm-url, CVA_LLM_URL or `llm_url` is required"))?;
            let plan = match cfg.shards {
                Some(n) => {
                    let backend = TrigramEmbedder::new();
                    let mut plan = partition::partition_glossary(&corpus.glossary, n, &backend, seed)
                        .await
                        .map_err(anyhow::Error::from)?;
                    plan.routing = partition::route_metadata(&corpus.columns, &plan, &backend)
                        .await
                        .map_err(anyhow::Error::from)?;
                    Some(plan)
                }
                None => None,
            };
            let scope = plan.as_ref().map_or(GlossaryScope::Full, GlossaryScope::Sharded);
            let report = eval::sweep(&corpus, &gt, &endpoint(&url), &cfg, scope, Some(&out.join("runs"))).await;
            (report.to_jsonl(), report.to_table())
        }
    };
    let jsonl_path = out.join("report.jsonl");
    let table_path = out.join("report.txt");
    std::fs::write(&jsonl_path, &jsonl).with_context(|| format!("writing {}", jsonl_path.display()))?;
    std::fs::write(&table_path, &table).with_context(|| format!("writing {}", table_path.display()))?;
    manifest.add_output(jsonl_path);
    manifest.add_output(table_path);
    manifest.finish(out).context("writing manifest")?;
    print!("{table}");
    Ok(())
}
