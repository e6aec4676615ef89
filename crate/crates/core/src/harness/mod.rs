//! Batch experiments: one Writer, several Editors, a shared first story per
//! tuple and an independent refinement branch per Editor.

pub mod store;

pub use store::{import_results, write_results, Checkpoint, ResultLine, ResultsHeader, RunFiles};

use crate::analytics::RESULTS_SCHEMA_VERSION;
use crate::domain::{enumerate_tuples, BranchKey, CatalogError, RefinementTrace, TileCatalog, TileTuple, TupleId};
use crate::engine::{assemble, BranchError, Draft, EditorHistory, Engine, LoopConfig, StopPolicy};
use crate::gateway::{GatewayStats, ModelHandle};
use chrono::{DateTime, Utc};
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use store::DraftRecord;
use tokio::sync::{mpsc, Semaphore};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("io: {0}")]
    Io(String),
    #[error("corrupt run directory: {0}")]
    Corrupt(String),
    #[error("{0} was written by a different configuration; use a fresh output directory")]
    SnapshotMismatch(PathBuf),
}

fn default_tuple_limit() -> usize {
    1000
}
fn default_horizon() -> u32 {
    5
}
fn default_concurrency() -> usize {
    4
}
fn default_retry_limit() -> u32 {
    LoopConfig::default().parse_retry_limit
}

/// Top-level keys of an experiment file. The same file may carry `[gateway]`
/// and `[models]` tables for [`crate::config::AppConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub writer: String,
    pub editors: Vec<String>,
    /// Tile catalog file; the built-in catalog when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<PathBuf>,
    #[serde(default = "default_tuple_limit")]
    pub tuple_limit: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_horizon")]
    pub horizon: u32,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default = "default_retry_limit")]
    pub parse_retry_limit: u32,
    #[serde(default)]
    pub editor_history: EditorHistory,
}

impl ExperimentConfig {
    pub fn new(writer: &str, editors: &[&str], tuple_limit: usize, horizon: u32) -> ExperimentConfig {
        ExperimentConfig {
            writer: writer.into(),
            editors: editors.iter().map(|e| e.to_string()).collect(),
            catalog: None,
            tuple_limit,
            seed: 0,
            horizon,
            concurrency: default_concurrency(),
            output: None,
            parse_retry_limit: default_retry_limit(),
            editor_history: EditorHistory::Last,
        }
    }

    pub fn from_toml(text: &str) -> Result<ExperimentConfig, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Loads and validates; `catalog` and `output` are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        let mut config = ExperimentConfig::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.catalog, &mut config.output].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.writer.trim().is_empty() {
            return fail("writer must be named");
        }
        if self.editors.is_empty() {
            return fail("at least one editor is required");
        }
        let unique: BTreeSet<&String> = self.editors.iter().collect();
        if unique.len() != self.editors.len() {
            return fail("editor names must be unique");
        }
        if self.editors.iter().any(|e| e.trim().is_empty()) {
            return fail("editor names must be non-empty");
        }
        if self.horizon == 0 {
            return fail("horizon must be at least 1");
        }
        if self.concurrency == 0 {
            return fail("concurrency must be at least 1");
        }
        if self.tuple_limit == 0 {
            return fail("tuple_limit must be at least 1");
        }
        Ok(())
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            max_loops: self.horizon,
            stop_policy: StopPolicy::FixedHorizon,
            parse_retry_limit: self.parse_retry_limit,
            editor_history: self.editor_history,
        }
    }

    pub fn load_catalog(&self) -> Result<TileCatalog, HarnessError> {
        Ok(match &self.catalog {
            Some(path) => TileCatalog::load(path)?,
            None => TileCatalog::builtin(),
        })
    }

    pub fn tuples(&self) -> Result<Vec<TileTuple>, HarnessError> {
        Ok(enumerate_tuples(&self.load_catalog()?, self.tuple_limit, self.seed)?)
    }

    /// Canonical text stored as `config.snapshot`. Concurrency and output
    /// location may change between resumes; everything else must not.
    pub fn snapshot(&self) -> String {
        let mut c = self.clone();
        c.concurrency = default_concurrency();
        c.output = None;
        toml::to_string(&c).expect("config serialises")
    }
}

/// Resolved model handles for a run.
#[derive(Debug, Clone)]
pub struct ExperimentModels {
    pub writer: ModelHandle,
    pub editors: Vec<ModelHandle>,
}

impl ExperimentModels {
    pub fn resolve<F, E>(config: &ExperimentConfig, mut resolve: F) -> Result<ExperimentModels, E>
    where
        F: FnMut(&str) -> Result<ModelHandle, E>,
    {
        Ok(ExperimentModels {
            writer: resolve(&config.writer)?,
            editors: config
                .editors
                .iter()
                .map(|e| resolve(e))
                .collect::<Result<_, _>>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchFailure {
    pub branch: BranchKey,
    pub kind: String,
    pub reason: String,
    /// Iterations completed before the failure.
    pub partial: RefinementTrace,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub started: Option<DateTime<Utc>>,
    pub finished: Option<DateTime<Utc>>,
    pub gateway: GatewayStats,
    /// Branches loaded from the checkpoint instead of executed.
    pub resumed_branches: usize,
    pub executed_branches: usize,
    /// Branches not attempted because `max_branches` was reached.
    pub skipped_branches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    /// Completed traces in tuple order, then config editor order.
    pub traces: Vec<RefinementTrace>,
    pub failures: Vec<BranchFailure>,
    pub metadata: RunMetadata,
}

impl ExperimentResult {
    pub fn header(&self) -> ResultsHeader {
        ResultsHeader {
            schema_version: RESULTS_SCHEMA_VERSION,
            writer: self.config.writer.clone(),
            editors: self.config.editors.clone(),
        }
    }
}

/// JSON lines: header, then one line per (tuple, editor, iteration).
pub fn export_results(result: &ExperimentResult, path: &Path) -> Result<(), HarnessError> {
    write_results(path, &result.header(), &result.traces)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop launching branches after this many; simulates an interrupted run.
    pub max_branches: Option<usize>,
}

enum SinkMsg {
    Draft(DraftRecord),
    Trace(Box<RefinementTrace>),
    Failure(Box<BranchFailure>),
}

struct SinkOutput {
    traces: Vec<RefinementTrace>,
    failures: Vec<BranchFailure>,
    error: Option<HarnessError>,
}

/// Single owner of every output file; branches report here over a channel.
async fn run_sink(mut files: Option<RunFiles>, mut rx: mpsc::UnboundedReceiver<SinkMsg>) -> SinkOutput {
    let mut out = SinkOutput {
        traces: Vec::new(),
        failures: Vec::new(),
        error: None,
    };
    while let Some(msg) = rx.recv().await {
        let written = match (&msg, files.as_mut()) {
            (_, None) => Ok(()),
            (SinkMsg::Draft(d), Some(f)) => f.record_draft(d),
            (SinkMsg::Trace(t), Some(f)) => f.record_trace(t),
            (SinkMsg::Failure(b), Some(f)) => f.record_failure(b),
        };
        if let Err(e) = written {
            tracing::error!(error = %e, "failed to persist experiment output");
            out.error.get_or_insert(e);
        }
        match msg {
            SinkMsg::Draft(_) => {}
            SinkMsg::Trace(t) => out.traces.push(*t),
            SinkMsg::Failure(f) => out.failures.push(*f),
        }
    }
    out
}

struct Shared<'a> {
    engine: &'a Engine,
    models: &'a ExperimentModels,
    loop_config: LoopConfig,
    permits: Semaphore,
    launched: AtomicUsize,
    max_branches: Option<usize>,
    skipped: AtomicUsize,
    tx: mpsc::UnboundedSender<SinkMsg>,
}

impl Shared<'_> {
    fn claim_branch(&self) -> bool {
        match self.max_branches {
            None => true,
            Some(max) => {
                let claimed = self
                    .launched
                    .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| (n < max).then_some(n + 1))
                    .is_ok();
                if !claimed {
                    self.skipped.fetch_add(1, Ordering::SeqCst);
                }
                claimed
            }
        }
    }

    fn send(&self, msg: SinkMsg) {
        // The sink outlives every branch; a closed channel means it already failed.
        let _ = self.tx.send(msg);
    }

    fn fail(&self, tuple: &TileTuple, editor: &ModelHandle, cause: &BranchError, partial: RefinementTrace) {
        tracing::warn!(tuple = %tuple.id(), editor = %editor.name, error = %cause, "branch failed");
        let mut partial = partial;
        partial.status = crate::domain::TraceStatus::Aborted {
            reason: cause.to_string(),
        };
        self.send(SinkMsg::Failure(Box::new(BranchFailure {
            branch: BranchKey {
                tuple_id: tuple.id(),
                editor: editor.name.clone(),
            },
            kind: cause.kind().to_string(),
            reason: cause.to_string(),
            partial,
        })));
    }

    async fn run_tuple(&self, tuple: TileTuple, pending: Vec<&ModelHandle>, prior_draft: Option<Draft>) {
        let pending: Vec<&ModelHandle> = pending.into_iter().filter(|_| self.claim_branch()).collect();
        if pending.is_empty() {
            return;
        }
        let draft = match prior_draft {
            Some(d) => d,
            None => {
                let _permit = self.permits.acquire().await.expect("semaphore open");
                match self.engine.write_story(&self.models.writer, &tuple, None, 1).await {
                    Ok(d) => {
                        self.send(SinkMsg::Draft(DraftRecord {
                            tuple_id: tuple.id(),
                            draft: d.clone(),
                        }));
                        d
                    }
                    Err(cause) => {
                        for editor in pending {
                            let empty = RefinementTrace::new(tuple.clone(), &self.models.writer.name, &editor.name);
                            self.fail(&tuple, editor, &cause, empty);
                        }
                        return;
                    }
                }
            }
        };
        let branches = pending.into_iter().map(|editor| self.run_branch(&tuple, editor, &draft));
        futures::future::join_all(branches).await;
    }

    async fn run_branch(&self, tuple: &TileTuple, editor: &ModelHandle, draft: &Draft) {
        let _permit = self.permits.acquire().await.expect("semaphore open");
        let writer = &self.models.writer;
        let verdict = match self
            .engine
            .evaluate_story(editor, tuple, &draft.story, &[], self.loop_config.parse_retry_limit)
            .await
        {
            Ok(v) => v,
            Err(cause) => {
                let empty = RefinementTrace::new(tuple.clone(), &writer.name, &editor.name);
                return self.fail(tuple, editor, &cause, empty);
            }
        };
        let seed = assemble(draft.clone(), verdict);
        match self
            .engine
            .run_loop(writer, editor, tuple, &self.loop_config, Some(seed))
            .await
        {
            Ok(trace) => self.send(SinkMsg::Trace(Box::new(trace))),
            Err(failed) => self.fail(tuple, editor, &failed.cause, failed.partial),
        }
    }
}

/// Runs every (tuple, editor) branch not already in the checkpoint.
///
/// With `out` set, results stream to that directory as branches finish and a
/// later call with the same directory resumes where this one stopped.
pub async fn run_experiment(
    engine: &Engine,
    config: &ExperimentConfig,
    models: &ExperimentModels,
    out: Option<&Path>,
    options: RunOptions,
) -> Result<ExperimentResult, HarnessError> {
    config.validate()?;
    let names: Vec<&str> = models.editors.iter().map(|m| m.name.as_str()).collect();
    if models.writer.name != config.writer || names != config.editors.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(HarnessError::Config("model handles do not match the configured names".into()));
    }
    let started = Utc::now();
    let tuples = config.tuples()?;

    let (files, prior) = match out {
        Some(dir) => {
            let (files, prior) = RunFiles::open(dir, config)?;
            (Some(files), prior)
        }
        None => (None, store::PriorRun::default()),
    };
    let completed = prior.checkpoint.completed.clone();
    let mut drafts: HashMap<TupleId, Draft> = prior
        .drafts
        .into_iter()
        .map(|r| (r.tuple_id, r.draft))
        .collect();

    let (tx, rx) = mpsc::unbounded_channel();
    let sink = tokio::spawn(run_sink(files, rx));
    let shared = Shared {
        engine,
        models,
        loop_config: config.loop_config(),
        permits: Semaphore::new(config.concurrency),
        launched: AtomicUsize::new(0),
        max_branches: options.max_branches,
        skipped: AtomicUsize::new(0),
        tx,
    };

    let mut jobs = Vec::new();
    for tuple in &tuples {
        let id = tuple.id();
        let pending: Vec<&ModelHandle> = models
            .editors
            .iter()
            .filter(|e| {
                !completed.contains(&BranchKey {
                    tuple_id: id.clone(),
                    editor: e.name.clone(),
                })
            })
            .collect();
        if !pending.is_empty() {
            jobs.push((tuple.clone(), pending, drafts.remove(&id)));
        }
    }
    futures::stream::iter(jobs)
        .map(|(tuple, pending, draft)| shared.run_tuple(tuple, pending, draft))
        .buffer_unordered(config.concurrency)
        .collect::<Vec<()>>()
        .await;

    let skipped = shared.skipped.load(Ordering::SeqCst);
    drop(shared);
    let sink = sink.await.map_err(|e| HarnessError::Io(format!("result writer panicked: {e}")))?;
    if let Some(e) = sink.error {
        return Err(e);
    }
    let executed = sink.traces.len() + sink.failures.len();

    let order: BTreeMap<(TupleId, String), (usize, usize)> = tuples
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            config
                .editors
                .iter()
                .enumerate()
                .map(move |(j, e)| ((t.id(), e.clone()), (i, j)))
        })
        .collect();
    let rank = |t: &RefinementTrace| {
        order
            .get(&(t.tuple_ref.clone(), t.editor_model.clone()))
            .copied()
            .unwrap_or((usize::MAX, usize::MAX))
    };
    let resumed = prior.traces.len();
    let mut traces = prior.traces;
    traces.extend(sink.traces);
    traces.sort_by_key(|t| rank(t));
    let mut failures = sink.failures;
    failures.sort_by_key(|f| rank(&f.partial));

    Ok(ExperimentResult {
        config: config.clone(),
        traces,
        failures,
        metadata: RunMetadata {
            started: Some(started),
            finished: Some(Utc::now()),
            gateway: engine.gateway().stats(),
            resumed_branches: resumed,
            executed_branches: executed,
            skipped_branches: skipped,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing_and_validation() {
        let c = ExperimentConfig::from_toml(
            r#"
            writer = "w"
            editors = ["a", "b"]
            tuple_limit = 10
            [gateway]
            endpoint = "http://x:1"
            "#,
        )
        .unwrap();
        assert_eq!(c.horizon, 5);
        assert_eq!(c.concurrency, 4);
        assert!(c.validate().is_ok());
        let mut bad = c.clone();
        bad.editors.clear();
        assert!(bad.validate().is_err());
        let mut bad = c.clone();
        bad.editors = vec!["a".into(), "a".into()];
        assert!(bad.validate().is_err());
        let mut bad = c.clone();
        bad.horizon = 0;
        assert!(bad.validate().is_err());
        assert!(ExperimentConfig::from_toml("editors = []").is_err());
    }

    #[test]
    fn snapshot_ignores_concurrency() {
        let a = ExperimentConfig::new("w", &["e"], 3, 2);
        let mut b = a.clone();
        b.concurrency = 16;
        assert_eq!(a.snapshot(), b.snapshot());
        b.horizon = 3;
        assert_ne!(a.snapshot(), b.snapshot());
    }
}
