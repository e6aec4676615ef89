use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};
use fableloop::analytics::{self, AnalysisOptions, ImprovementRule, Link, SeparationPolicy};
use fableloop::config::{AppConfig, Runtime};
use fableloop::domain::{Story, TileCatalog, TileTuple};
use fableloop::engine::{select_final_story, EditorHistory, LoopConfig, StopPolicy};
use fableloop::harness::{self, ExperimentConfig, ExperimentModels, RunOptions};
use fableloop::service::{self, ServiceConfig, ServiceModels, ServiceState};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

#[derive(Parser)]
#[command(name = "fableloop", version, about = "Writer-Editor story refinement loops")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Refine one story for one tuple.
    Run(RunArgs),
    /// Run a batch experiment from a config file.
    Experiment(ExperimentArgs),
    /// Score tables and survival analysis from a results file.
    Analyze(AnalyzeArgs),
    /// Serve the interactive session API.
    Serve(ServeArgs),
    /// Write the built-in prompt templates to a directory for editing.
    Templates {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Tuple file (TOML or JSON table of kind = label) or inline `kind=label;...`.
    #[arg(long)]
    tuple: String,
    #[arg(long)]
    writer: String,
    #[arg(long)]
    editor: String,
    #[arg(long, default_value_t = 5)]
    max_loops: u32,
    /// Stop once a score reaches this percentage.
    #[arg(long, conflicts_with = "patience")]
    threshold: Option<f64>,
    /// Stop after this many loops without a new best score.
    #[arg(long)]
    patience: Option<u32>,
    #[arg(long, default_value_t = 2)]
    parse_retries: u32,
    /// Show the subsequent-loop Editor every earlier story and critique.
    #[arg(long)]
    full_history: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the rendered first-loop prompts and exit.
    #[arg(long)]
    dump_prompts: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output` in the config file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Launch at most this many branches, then stop (the run can be resumed).
    #[arg(long)]
    max_branches: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "table1.csv")]
    table: PathBuf,
    #[arg(long, default_value = "curves")]
    survival_dir: PathBuf,
    #[arg(long, default_value = "summary.txt")]
    report: PathBuf,
    #[arg(long, default_value = "logit")]
    link: Link,
    /// A tie ends a branch (true) or survives (false).
    #[arg(long, default_value_t = true, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    strict_improvement: bool,
    /// Fail instead of falling back to a penalised fit under separation.
    #[arg(long)]
    no_firth: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// TOML with `[gateway]`, `[models]` and `[serve]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    writer: Option<String>,
    #[arg(long)]
    editor: Option<String>,
    #[arg(long)]
    guide: Option<String>,
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[arg(long)]
    persist_dir: Option<PathBuf>,
}

/// `[serve]` table of the serve config file.
#[derive(serde::Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct ServeFile {
    writer: Option<String>,
    editor: Option<String>,
    guide: Option<String>,
    catalog: Option<PathBuf>,
    static_dir: Option<PathBuf>,
    persist_dir: Option<PathBuf>,
    max_loops: Option<u32>,
    idle_threshold_secs: Option<u64>,
}

#[derive(serde::Deserialize, Default)]
#[serde(default)]
struct ServeDocument {
    serve: ServeFile,
}

fn runtime(config: Option<&Path>) -> Result<Runtime> {
    let app = match config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    Ok(Runtime::build(app.with_process_env()?)?)
}

fn read_tuple(spec: &str) -> Result<TileTuple> {
    let path = Path::new(spec);
    if !path.is_file() {
        return Ok(TileTuple::parse_inline(spec)?);
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {spec}"))?;
    let pairs: BTreeMap<String, String> = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text)?
    };
    Ok(TileTuple::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?)
}

async fn cmd_run(args: RunArgs) -> Result<()> {
    let tuple = read_tuple(&args.tuple)?;
    let rt = runtime(args.config.as_deref())?;
    if args.dump_prompts {
        let writer_prompt = rt.forge.render_writer_first(&tuple)?;
        let placeholder = Story {
            text: "(the story written by the Writer appears here)".into(),
            writer_model: args.writer.clone(),
            loop_index: 1,
            tuple_ref: tuple.id(),
        };
        let editor_prompt = rt.forge.render_editor_first(&tuple, &placeholder)?;
        println!("===== writer_first =====\n{writer_prompt}\n\n===== editor_first =====\n{editor_prompt}");
        return Ok(());
    }
    let stop_policy = match (args.threshold, args.patience) {
        (Some(threshold), _) => StopPolicy::ScoreThreshold { threshold },
        (None, Some(patience)) => StopPolicy::NoImprovement { patience },
        (None, None) => StopPolicy::FixedHorizon,
    };
    let config = LoopConfig {
        max_loops: args.max_loops,
        stop_policy,
        parse_retry_limit: args.parse_retries,
        editor_history: if args.full_history { EditorHistory::Full } else { EditorHistory::Last },
    };
    config.validate()?;
    let writer = rt.resolve(&args.writer)?;
    let editor = rt.resolve(&args.editor)?;
    let engine = rt.engine();
    let (trace, failure) = match engine.run_loop(&writer, &editor, &tuple, &config, None).await {
        Ok(t) => (t, None),
        Err(f) => (f.partial, Some(f.cause)),
    };
    let json = serde_json::to_string_pretty(&trace)?;
    match &args.out {
        Some(path) => std::fs::write(path, &json).with_context(|| format!("writing {}", path.display()))?,
        None => println!("{json}"),
    }
    let scores: Vec<String> = trace.scores().iter().map(|s| format!("{s}")).collect();
    eprintln!("scores: [{}]  final choice: loop {}", scores.join(", "), trace.final_choice);
    if let Some(cause) = failure {
        bail!("branch failed after {} iterations: {cause}", trace.iterations.len());
    }
    if args.out.is_some() {
        eprintln!("{}", select_final_story(&trace)?.text);
    }
    Ok(())
}

async fn cmd_experiment(args: ExperimentArgs) -> Result<()> {
    let config = ExperimentConfig::load(&args.config)?;
    let rt = runtime(Some(&args.config))?;
    let out = args
        .out
        .or_else(|| config.output.clone())
        .context("no output directory: pass --out or set `output` in the config")?;
    let models = ExperimentModels::resolve(&config, |n| rt.resolve(n))?;
    let engine = rt.engine();
    let result = harness::run_experiment(
        &engine,
        &config,
        &models,
        Some(&out),
        RunOptions {
            max_branches: args.max_branches,
        },
    )
    .await?;
    let m = &result.metadata;
    eprintln!(
        "{} traces ({} resumed, {} run now), {} failures, {} skipped; {} model calls, {} retries",
        result.traces.len(),
        m.resumed_branches,
        m.executed_branches - result.failures.len(),
        result.failures.len(),
        m.skipped_branches,
        m.gateway.calls,
        m.gateway.retries
    );
    eprintln!("results in {}", out.display());
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let rows = analytics::load_results(&args.input)?;
    let options = AnalysisOptions {
        link: args.link,
        rule: ImprovementRule::from_strict(args.strict_improvement),
        separation: if args.no_firth { SeparationPolicy::Error } else { SeparationPolicy::Firth },
    };
    let report = analytics::analyze(&rows, options)?;
    let curves = analytics::emit_report(&report, &args.table, &args.survival_dir, &args.report)?;
    print!("{}", analytics::render_summary(&report));
    eprintln!(
        "wrote {}, {} and {} curve file(s) in {}",
        args.table.display(),
        args.report.display(),
        curves.len(),
        args.survival_dir.display()
    );
    Ok(())
}

async fn cmd_serve(args: ServeArgs) -> Result<()> {
    let rt = runtime(args.config.as_deref())?;
    let file = match &args.config {
        Some(p) => {
            let mut doc: ServeDocument = toml::from_str(&std::fs::read_to_string(p)?)?;
            let base = p.parent().unwrap_or(Path::new("."));
            for path in [&mut doc.serve.catalog, &mut doc.serve.static_dir, &mut doc.serve.persist_dir]
                .into_iter()
                .flatten()
            {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
            doc.serve
        }
        None => ServeFile::default(),
    };
    let writer = args.writer.or(file.writer).context("no writer model: pass --writer or set [serve] writer")?;
    let editor = args.editor.or(file.editor).context("no editor model: pass --editor or set [serve] editor")?;
    let guide = args.guide.or(file.guide).unwrap_or_else(|| writer.clone());
    let catalog = match args.catalog.or(file.catalog) {
        Some(p) => TileCatalog::load(&p)?,
        None => TileCatalog::builtin(),
    };
    let mut loop_config = LoopConfig::default();
    if let Some(n) = file.max_loops {
        loop_config.max_loops = n;
    }
    loop_config.validate()?;
    let config = ServiceConfig {
        loop_config,
        idle_threshold: file
            .idle_threshold_secs
            .map_or(fableloop::prompts::DEFAULT_IDLE_THRESHOLD, Duration::from_secs),
        persist_dir: args.persist_dir.or(file.persist_dir),
        static_dir: args.static_dir.or(file.static_dir),
    };
    let models = ServiceModels {
        writer: rt.resolve(&writer)?,
        editor: rt.resolve(&editor)?,
        guide: rt.resolve(&guide)?,
    };
    let state = ServiceState::new(rt.engine(), catalog, models, config);
    service::serve(Arc::new(state), (args.host, args.port).into()).await?;
    Ok(())
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Run(a) => cmd_run(a).await,
        Command::Experiment(a) => cmd_experiment(a).await,
        Command::Analyze(a) => cmd_analyze(a),
        Command::Serve(a) => cmd_serve(a).await,
        Command::Templates { out } => {
            fableloop::prompts::PromptForge::builtin().write_dir(&out)?;
            eprintln!("wrote templates to {}", out.display());
            Ok(())
        }
    }
}
