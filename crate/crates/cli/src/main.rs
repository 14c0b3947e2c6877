mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use text2table::backend::{
    build_generator, BackendConfig, BackendKind, ConfigError, Embedder, EmbedderKind, MockEmbedder,
    OracleBackend, RecordingBackend, ReplayBackend, TextGenerator,
};
use text2table::corpus::{self, corpus_stats, fixtures, load_jsonl, load_predictions, Sample};
use text2table::metrics::{evaluate_corpus, evaluate_corpus_semantic, run_ablation};
use text2table::pipeline::{HeaderMode, Pipeline, SampleOutput, SkeletonDelta, TokenLimits};
use text2table::qa::Prompts;
use text2table::table::serialize_flat;
use text2table::{DatasetKind, Table};

use crate::config::FileConfig;

#[derive(Debug, Parser)]
#[command(
    name = "text2table",
    version,
    about = "Generate tables from text and score them"
)]
struct Cli {
    /// TOML file with [backend], [run] and [templates] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every randomized component (replay jitter, mock embeddings).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Two-stage generation for one passage or a corpus.
    Generate(GenerateArgs),
    /// Single-stage flat-format generation.
    Baseline(GenerateArgs),
    /// Score predictions against gold tables.
    Evaluate(EvaluateArgs),
    /// Extend an existing table from new evidence.
    Update(UpdateArgs),
    /// Corpus statistics.
    Stats(StatsArgs),
    /// Run generation through a live backend and save every exchange as a fixture.
    ReplayRecord(RecordArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Text,
    Flat,
    Markdown,
}

#[derive(Debug, Args)]
struct BackendArgs {
    #[arg(long)]
    backend: Option<BackendKind>,
    /// Fixture directory for the replay backend.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Samples processed concurrently.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    structure_template: Option<PathBuf>,
    #[arg(long)]
    qa_template: Option<PathBuf>,
    #[arg(long)]
    flat_template: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InputArgs {
    #[arg(long)]
    kind: Option<DatasetKind>,
    /// JSONL corpus (gold tables also feed the mock-oracle backend).
    #[arg(long = "in", conflicts_with_all = ["text", "text_file"])]
    input: Option<PathBuf>,
    /// A single passage.
    #[arg(long, conflicts_with = "text_file")]
    text: Option<String>,
    #[arg(long)]
    text_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    backend: BackendArgs,
    /// Seed stage two with the gold headers of each sample.
    #[arg(long)]
    gold_headers: bool,
    /// Include per-cell traces in JSON output.
    #[arg(long)]
    trace: bool,
    /// Keep latencies in traces (output is then not reproducible).
    #[arg(long)]
    with_latency: bool,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    kind: Option<DatasetKind>,
    #[arg(long)]
    gold: PathBuf,
    /// Predictions JSONL with `id` and `table` (or `flat`) per line.
    #[arg(long, required_unless_present = "ablation")]
    pred: Option<PathBuf>,
    /// Record that predictions were made from gold headers.
    #[arg(long)]
    gold_headers: bool,
    /// Generate with predicted and with gold headers and compare.
    #[arg(long, conflicts_with = "pred")]
    ablation: bool,
    /// Add embedding-similarity scores.
    #[arg(long)]
    semantic: bool,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct UpdateArgs {
    #[arg(long)]
    kind: Option<DatasetKind>,
    /// Existing table (canonical JSON).
    #[arg(long)]
    table: PathBuf,
    /// Headers to add and cells to re-ask (JSON).
    #[arg(long)]
    delta: PathBuf,
    #[arg(long, conflicts_with = "text_file")]
    text: Option<String>,
    #[arg(long)]
    text_file: Option<PathBuf>,
    /// Gold table for the new evidence, used by the mock-oracle backend.
    #[arg(long)]
    gold: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long)]
    trace: bool,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    kind: Option<DatasetKind>,
    /// Corpus files; each becomes a split named after its file stem.
    #[arg(long = "in")]
    inputs: Vec<PathBuf>,
    /// Use the bundled fixtures instead of files.
    #[arg(long, conflicts_with = "inputs")]
    bundled: bool,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RecordArgs {
    #[arg(long)]
    kind: Option<DatasetKind>,
    #[arg(long = "in")]
    input: PathBuf,
    /// Directory the fixtures are written to.
    #[arg(long)]
    dir: PathBuf,
    /// Record the flat-format baseline instead of two-stage generation.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    gold_headers: bool,
    #[command(flatten)]
    backend: BackendArgs,
}

/// Exit 2: the run could not be configured. Exit 1: it ran but failed.
#[derive(Debug)]
enum Failure {
    Config(String),
    Run(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<corpus::CorpusError> for Failure {
    fn from(e: corpus::CorpusError) -> Self {
        Failure::Config(e.to_string())
    }
}

#[derive(Debug, PartialEq, Eq)]
enum Status {
    Ok,
    Partial,
}

struct Context {
    file: FileConfig,
    seed: u64,
}

impl Context {
    fn kind(&self, flag: Option<DatasetKind>) -> Result<DatasetKind, Failure> {
        flag.or(self.file.run.kind)
            .ok_or_else(|| Failure::Config("no dataset kind: pass --kind or set run.kind".into()))
    }

    fn backend_config(&self, args: &BackendArgs) -> BackendConfig {
        let mut config = self.file.backend.clone();
        if let Some(kind) = args.backend {
            config.kind = kind;
        }
        if let Some(dir) = &args.fixtures {
            config.fixture_dir = Some(dir.clone());
        }
        config
    }

    fn jobs(&self, args: &BackendArgs) -> usize {
        args.jobs.unwrap_or(self.file.run.jobs).max(1)
    }

    fn prompts(
        &self,
        kind: DatasetKind,
        config: &BackendConfig,
        args: &BackendArgs,
    ) -> Result<Prompts, Failure> {
        let read =
            |path: &Option<PathBuf>, inline: &Option<String>| -> Result<Option<String>, Failure> {
                match path {
                    Some(p) => std::fs::read_to_string(p).map(Some).map_err(|e| {
                        Failure::Config(format!("cannot read template {}: {e}", p.display()))
                    }),
                    None => Ok(inline.clone()),
                }
            };
        let t = &self.file.templates;
        let bad = |e: text2table::qa::QaError| Failure::Config(format!("template: {e}"));
        let mut prompts = Prompts::new(kind).with_context_tokens(config.context_tokens);
        if let Some(text) = read(&args.structure_template, &t.structure)? {
            prompts = prompts.with_structure_template(text).map_err(bad)?;
        }
        if let Some(text) = read(&args.qa_template, &t.qa)? {
            prompts = prompts.with_qa_template(text).map_err(bad)?;
        }
        if let Some(text) = read(&args.flat_template, &t.flat)? {
            prompts = prompts.with_flat_template(text).map_err(bad)?;
        }
        Ok(prompts)
    }

    /// The configured generator. Gold tables feed the mock-oracle backend.
    fn generator(
        &self,
        config: &BackendConfig,
        gold: &[(String, Table)],
    ) -> Result<Arc<dyn TextGenerator>, Failure> {
        let oracle = (config.kind == BackendKind::MockOracle && !gold.is_empty()).then(|| {
            let mut oracle = OracleBackend::new();
            for (text, table) in gold {
                oracle.insert(text, table.clone());
            }
            oracle
        });
        let jitter = self.file.run.replay_jitter_ms;
        if config.kind == BackendKind::Replay && jitter > 0 {
            let dir = config
                .fixture_dir
                .clone()
                .ok_or(ConfigError::MissingFixtureDir)?;
            let replay = ReplayBackend::open(&dir)
                .map_err(|source| ConfigError::Fixtures { path: dir, source })?
                .with_latency_jitter(self.seed, Duration::from_millis(jitter))
                .with_concurrency(config.concurrency);
            return Ok(Arc::new(replay));
        }
        Ok(build_generator(config, oracle, |var| {
            std::env::var(var).ok()
        })?)
    }

    fn pipeline<G: TextGenerator>(
        &self,
        backend: G,
        prompts: Prompts,
        config: &BackendConfig,
    ) -> Pipeline<G> {
        Pipeline::with_prompts(backend, prompts).with_limits(TokenLimits {
            answer: config.max_new_tokens,
            ..TokenLimits::default()
        })
    }
}

fn write_output(out: &Option<PathBuf>, text: &str) -> Result<(), Failure> {
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| Failure::Run(format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Failure::Run(format!("cannot write output: {e}")))
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("{what} {}: {e}", path.display())))
}

fn passage(text: &Option<String>, file: &Option<PathBuf>) -> Result<Option<String>, Failure> {
    match (text, file) {
        (Some(t), _) => Ok(Some(t.clone())),
        (None, Some(p)) => std::fs::read_to_string(p)
            .map(Some)
            .map_err(|e| Failure::Config(format!("cannot read {}: {e}", p.display()))),
        (None, None) => Ok(None),
    }
}

fn reject_format(format: Format, allowed: &[Format]) -> Result<(), Failure> {
    if allowed.contains(&format) {
        Ok(())
    } else {
        Err(Failure::Config(
            format!("--format {format:?} is not available here").to_lowercase(),
        ))
    }
}

/// Samples to run: a corpus file, or one passage wrapped as sample "input".
fn samples(input: &InputArgs, kind: DatasetKind) -> Result<(Vec<Sample>, bool), Failure> {
    if let Some(path) = &input.input {
        return Ok((load_jsonl(path, kind)?, true));
    }
    let text = passage(&input.text, &input.text_file)?
        .ok_or_else(|| Failure::Config("no input: pass --in, --text or --text-file".into()))?;
    // Placeholder gold; only the text is used.
    let placeholder =
        Table::attribute_value([("input", None::<String>)]).expect("valid placeholder");
    Ok((
        vec![Sample {
            id: "input".into(),
            text,
            table: placeholder,
            kind,
        }],
        false,
    ))
}

fn render_outputs(outputs: &[SampleOutput], format: Format, corpus: bool) -> String {
    let mut out = String::new();
    for o in outputs {
        match format {
            Format::Json => {
                out.push_str(&serde_json::to_string(o).expect("serializable"));
                out.push('\n');
            }
            Format::Flat => {
                let flat = o
                    .table
                    .as_ref()
                    .and_then(|t| serialize_flat(t).ok())
                    .unwrap_or_default();
                if corpus {
                    out.push_str(&format!("{}\t{flat}\n", o.id));
                } else {
                    out.push_str(&format!("{flat}\n"));
                }
            }
            _ => {
                if corpus {
                    out.push_str(&format!("## {}\n\n", o.id));
                }
                match (&o.table, &o.error) {
                    (Some(t), _) => out.push_str(&t.to_markdown()),
                    (None, Some(e)) => out.push_str(&format!("(no table: {e})\n")),
                    (None, None) => out.push_str("(no table)\n"),
                }
                if corpus {
                    out.push('\n');
                }
            }
        }
    }
    out
}

fn status_of(outputs: &[SampleOutput]) -> Status {
    for o in outputs.iter().filter(|o| o.error.is_some()) {
        eprintln!(
            "sample {}: {}",
            o.id,
            o.error.as_deref().unwrap_or_default()
        );
    }
    if outputs.iter().any(|o| o.error.is_some() || o.errored) {
        Status::Partial
    } else {
        Status::Ok
    }
}

async fn generate(ctx: &Context, args: &GenerateArgs, baseline: bool) -> Result<Status, Failure> {
    reject_format(
        args.format,
        &[Format::Json, Format::Text, Format::Flat, Format::Markdown],
    )?;
    let kind = ctx.kind(args.input.kind)?;
    let config = ctx.backend_config(&args.backend);
    let (samples, corpus) = samples(&args.input, kind)?;
    let gold: Vec<(String, Table)> = if corpus {
        samples
            .iter()
            .map(|s| (s.text.clone(), s.table.clone()))
            .collect()
    } else {
        Vec::new()
    };
    let backend = ctx.generator(&config, &gold)?;
    let pipeline = ctx.pipeline(backend, ctx.prompts(kind, &config, &args.backend)?, &config);
    let jobs = ctx.jobs(&args.backend);
    let mode = if args.gold_headers {
        HeaderMode::Gold
    } else {
        ctx.file.run.header_mode
    };
    if mode == HeaderMode::Gold && !corpus {
        return Err(Failure::Config(
            "--gold-headers needs a corpus with gold tables (--in)".into(),
        ));
    }
    let mut outputs = if baseline {
        pipeline.run_baseline_corpus(&samples, jobs).await
    } else {
        pipeline.run_corpus(&samples, mode, jobs).await
    };
    for o in &mut outputs {
        o.trace = match o.trace.take() {
            Some(t) if args.trace && args.with_latency => Some(t),
            Some(t) if args.trace => Some(t.without_timings()),
            _ => None,
        };
    }
    write_output(&args.out, &render_outputs(&outputs, args.format, corpus))?;
    Ok(status_of(&outputs))
}

async fn evaluate(ctx: &Context, args: &EvaluateArgs) -> Result<Status, Failure> {
    reject_format(args.format, &[Format::Json, Format::Csv, Format::Text])?;
    let kind = ctx.kind(args.kind)?;
    let golds = load_jsonl(&args.gold, kind)?;
    if args.ablation {
        let config = ctx.backend_config(&args.backend);
        let gold: Vec<(String, Table)> = golds
            .iter()
            .map(|s| (s.text.clone(), s.table.clone()))
            .collect();
        let backend = ctx.generator(&config, &gold)?;
        let pipeline = ctx.pipeline(backend, ctx.prompts(kind, &config, &args.backend)?, &config);
        let report = run_ablation(&pipeline, &golds, ctx.jobs(&args.backend))
            .await
            .map_err(|e| Failure::Run(e.to_string()))?;
        let text = match args.format {
            Format::Json => serde_json::to_string_pretty(&report).expect("serializable") + "\n",
            Format::Csv => {
                let mut csv = report
                    .predicted
                    .to_csv()
                    .map_err(|e| Failure::Run(e.to_string()))?;
                csv.push_str(
                    &report
                        .gold
                        .to_csv()
                        .map_err(|e| Failure::Run(e.to_string()))?,
                );
                csv
            }
            _ => report.to_text(),
        };
        write_output(&args.out, &text)?;
        return Ok(Status::Ok);
    }
    let pred_path = args
        .pred
        .as_ref()
        .expect("clap requires --pred without --ablation");
    let preds = load_predictions(pred_path, kind)?;
    let mode = if args.gold_headers {
        HeaderMode::Gold
    } else {
        ctx.file.run.header_mode
    };
    let report = if args.semantic {
        let config = ctx.backend_config(&args.backend);
        let embedder: Arc<dyn Embedder> = match config.embedder {
            EmbedderKind::Mock => Arc::new(MockEmbedder::new(config.embedding_dim, ctx.seed)),
            EmbedderKind::Http => config.embedder(|var| std::env::var(var).ok())?,
        };
        evaluate_corpus_semantic(&preds, &golds, mode, embedder.as_ref())
            .await
            .map_err(|e| Failure::Run(e.to_string()))?
    } else {
        evaluate_corpus(&preds, &golds, mode).map_err(|e| Failure::Run(e.to_string()))?
    };
    let text = match args.format {
        Format::Json => serde_json::to_string_pretty(&report).expect("serializable") + "\n",
        Format::Csv => report.to_csv().map_err(|e| Failure::Run(e.to_string()))?,
        _ => report.to_text(),
    };
    write_output(&args.out, &text)?;
    Ok(Status::Ok)
}

async fn update(ctx: &Context, args: &UpdateArgs) -> Result<Status, Failure> {
    reject_format(
        args.format,
        &[Format::Json, Format::Text, Format::Flat, Format::Markdown],
    )?;
    let kind = ctx.kind(args.kind)?;
    let table: Table = read_json(&args.table, "table")?;
    let delta: SkeletonDelta = read_json(&args.delta, "delta")?;
    let text = passage(&args.text, &args.text_file)?
        .ok_or_else(|| Failure::Config("no evidence: pass --text or --text-file".into()))?;
    let gold = match &args.gold {
        Some(path) => vec![(text.clone(), read_json::<Table>(path, "gold table")?)],
        None => Vec::new(),
    };
    let config = ctx.backend_config(&args.backend);
    let backend = ctx.generator(&config, &gold)?;
    let pipeline = ctx.pipeline(backend, ctx.prompts(kind, &config, &args.backend)?, &config);
    let (updated, trace) = pipeline
        .update_table(&table, &delta, &text)
        .await
        .map_err(|e| Failure::Run(e.to_string()))?;
    let failed = trace.failed_cells();
    let output = SampleOutput {
        id: "update".into(),
        table: Some(updated),
        errored: false,
        error: (failed > 0).then(|| format!("{failed} cell requests failed")),
        trace: args.trace.then(|| trace.without_timings()),
    };
    write_output(
        &args.out,
        &render_outputs(std::slice::from_ref(&output), args.format, false),
    )?;
    Ok(status_of(std::slice::from_ref(&output)))
}

fn stats(ctx: &Context, args: &StatsArgs) -> Result<Status, Failure> {
    reject_format(args.format, &[Format::Json, Format::Csv, Format::Text])?;
    let mut splits: Vec<(String, Vec<Sample>)> = Vec::new();
    if args.bundled {
        let kinds: Vec<DatasetKind> = match args.kind.or(ctx.file.run.kind) {
            Some(k) => vec![k],
            None => DatasetKind::ALL.to_vec(),
        };
        let mut mini = Vec::new();
        let mut examples = Vec::new();
        for kind in kinds {
            mini.extend(fixtures::mini(kind));
            examples.extend(fixtures::examples(kind));
        }
        splits.push(("examples".into(), examples));
        splits.push(("mini".into(), mini));
    } else {
        if args.inputs.is_empty() {
            return Err(Failure::Config("no input: pass --in or --bundled".into()));
        }
        let kind = ctx.kind(args.kind)?;
        for path in &args.inputs {
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .map(|n| {
                    n.trim_end_matches(".gz")
                        .trim_end_matches(".jsonl")
                        .to_string()
                })
                .unwrap_or_else(|| path.display().to_string());
            splits.push((name, load_jsonl(path, kind)?));
        }
    }
    let stats = corpus_stats(splits.iter().map(|(n, s)| (n.as_str(), s.as_slice())));
    let text = match args.format {
        Format::Json => serde_json::to_string_pretty(&stats).expect("serializable") + "\n",
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let rows = std::iter::once(
                ["kind", "samples", "mean_rows", "mean_cols", "sparsity"].map(String::from),
            )
            .chain(stats.kinds.iter().map(|(k, s)| {
                [
                    k.to_string(),
                    s.samples.to_string(),
                    format!("{:.6}", s.mean_rows),
                    format!("{:.6}", s.mean_cols),
                    format!("{:.6}", s.sparsity),
                ]
            }));
            for row in rows {
                w.write_record(&row)
                    .map_err(|e| Failure::Run(e.to_string()))?;
            }
            String::from_utf8(w.into_inner().map_err(|e| Failure::Run(e.to_string()))?)
                .expect("utf-8")
        }
        _ => stats.to_text(),
    };
    write_output(&args.out, &text)?;
    Ok(Status::Ok)
}

async fn record(ctx: &Context, args: &RecordArgs) -> Result<Status, Failure> {
    let kind = ctx.kind(args.kind)?;
    let config = ctx.backend_config(&args.backend);
    if config.kind == BackendKind::Replay {
        return Err(Failure::Config(
            "recording needs a live backend (http or mock-oracle)".into(),
        ));
    }
    let samples = load_jsonl(&args.input, kind)?;
    let gold: Vec<(String, Table)> = samples
        .iter()
        .map(|s| (s.text.clone(), s.table.clone()))
        .collect();
    let backend = ctx.generator(&config, &gold)?;
    let recorder = RecordingBackend::new(backend, &args.dir)
        .map_err(|e| Failure::Config(format!("cannot use {}: {e}", args.dir.display())))?;
    let pipeline = ctx.pipeline(
        recorder,
        ctx.prompts(kind, &config, &args.backend)?,
        &config,
    );
    let jobs = ctx.jobs(&args.backend);
    let outputs = if args.baseline {
        pipeline.run_baseline_corpus(&samples, jobs).await
    } else {
        let mode = if args.gold_headers {
            HeaderMode::Gold
        } else {
            ctx.file.run.header_mode
        };
        pipeline.run_corpus(&samples, mode, jobs).await
    };
    let written = std::fs::read_dir(&args.dir).map(|d| d.count()).unwrap_or(0);
    eprintln!("{written} fixtures in {}", args.dir.display());
    Ok(status_of(&outputs))
}

async fn dispatch(cli: Cli) -> Result<Status, Failure> {
    let file = match &cli.config {
        Some(path) => config::load(path).map_err(Failure::Config)?,
        None => FileConfig::default(),
    };
    let ctx = Context {
        seed: cli.seed.unwrap_or(file.run.seed),
        file,
    };
    match &cli.command {
        Command::Generate(args) => generate(&ctx, args, false).await,
        Command::Baseline(args) => generate(&ctx, args, true).await,
        Command::Evaluate(args) => evaluate(&ctx, args).await,
        Command::Update(args) => update(&ctx, args).await,
        Command::Stats(args) => stats(&ctx, args),
        Command::ReplayRecord(args) => record(&ctx, args).await,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let runtime = match tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
    {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(1);
        }
    };
    match runtime.block_on(dispatch(cli)) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(1),
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
    }
}
