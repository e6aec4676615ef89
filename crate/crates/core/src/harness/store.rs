//! On-disk layout of an experiment run.
//!
//! ```text
//! results.jsonl     header line, then one line per (tuple, editor, iteration)
//! stories.jsonl     {"hash", "text"} for every distinct story
//! traces.jsonl      full RefinementTrace per completed branch
//! failures.jsonl    one line per failed branch
//! drafts.jsonl      the shared first story per tuple, reused on resume
//! checkpoint.json   completed branch keys (replaced atomically)
//! config.snapshot   the configuration the run was started with
//! ```

use super::{BranchFailure, ExperimentConfig, HarnessError};
use crate::analytics::RESULTS_SCHEMA_VERSION;
use crate::domain::{BranchKey, IterationTimings, RefinementTrace, TupleId};
use crate::engine::Draft;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::collections::{BTreeSet, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

pub const RESULTS_FILE: &str = "results.jsonl";
pub const STORIES_FILE: &str = "stories.jsonl";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const DRAFTS_FILE: &str = "drafts.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SNAPSHOT_FILE: &str = "config.snapshot";

/// One exported metrics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultLine {
    pub tuple_id: TupleId,
    pub editor: String,
    pub loop_index: u32,
    pub score: f64,
    pub story_hash: String,
    pub timings: IterationTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsHeader {
    pub schema_version: u32,
    pub writer: String,
    pub editors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryRecord {
    pub hash: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftRecord {
    pub tuple_id: TupleId,
    pub draft: Draft,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub completed: BTreeSet<BranchKey>,
}

pub fn result_lines(trace: &RefinementTrace) -> Vec<ResultLine> {
    trace
        .iterations
        .iter()
        .map(|it| ResultLine {
            tuple_id: trace.tuple_ref.clone(),
            editor: trace.editor_model.clone(),
            loop_index: it.loop_index(),
            score: it.score(),
            story_hash: it.story.hash(),
            timings: it.timings,
        })
        .collect()
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

pub fn write_json_line<T: Serialize>(w: &mut impl Write, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")
}

/// Reads every line of a JSON-lines file; a missing file reads as empty.
/// A torn final line (from a crash mid-write) is dropped.
pub fn read_json_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path, e)),
    };
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| io_err(path, e))?;
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(_) if Some(i) == last => break,
            Err(e) => return Err(io_err(path, format!("line {}: {e}", i + 1))),
        }
    }
    Ok(out)
}

/// Replaces `path` by writing a sibling temp file and renaming it over.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Writes the header followed by every iteration of every trace.
pub fn write_results(
    path: &Path,
    header: &ResultsHeader,
    traces: &[RefinementTrace],
) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    write_json_line(&mut w, header).map_err(|e| io_err(path, e))?;
    for trace in traces {
        for line in result_lines(trace) {
            write_json_line(&mut w, &line).map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads an exported results file back, checking its header.
pub fn import_results(path: &Path) -> Result<(ResultsHeader, Vec<ResultLine>), HarnessError> {
    let values: Vec<serde_json::Value> = read_json_lines(path)?;
    let mut it = values.into_iter();
    let header: ResultsHeader = it
        .next()
        .ok_or_else(|| HarnessError::Corrupt(format!("{}: missing header", path.display())))
        .and_then(|v| serde_json::from_value(v).map_err(|e| HarnessError::Corrupt(e.to_string())))?;
    if header.schema_version != RESULTS_SCHEMA_VERSION {
        return Err(HarnessError::Corrupt(format!(
            "results schema_version {} (expected {RESULTS_SCHEMA_VERSION})",
            header.schema_version
        )));
    }
    let lines = it
        .map(|v| serde_json::from_value(v).map_err(|e| HarnessError::Corrupt(e.to_string())))
        .collect::<Result<_, _>>()?;
    Ok((header, lines))
}

/// Append-only writers for a run directory, owned by the single sink task.
pub struct RunFiles {
    root: PathBuf,
    results: BufWriter<File>,
    stories: BufWriter<File>,
    traces: BufWriter<File>,
    failures: BufWriter<File>,
    drafts: BufWriter<File>,
    known_stories: HashSet<String>,
    checkpoint: Checkpoint,
}

/// What a previous run left behind.
#[derive(Debug, Default)]
pub struct PriorRun {
    pub checkpoint: Checkpoint,
    pub traces: Vec<RefinementTrace>,
    pub drafts: Vec<DraftRecord>,
}

fn open_append(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map(BufWriter::new)
        .map_err(|e| io_err(path, e))
}

impl RunFiles {
    /// Opens `root` for a run, recovering state from an earlier interrupted run.
    ///
    /// Lines for branches that never reached the checkpoint are discarded so a
    /// resumed run does not duplicate them.
    pub fn open(root: &Path, config: &ExperimentConfig) -> Result<(RunFiles, PriorRun), HarnessError> {
        std::fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        let snapshot_path = root.join(SNAPSHOT_FILE);
        let snapshot = config.snapshot();
        match std::fs::read_to_string(&snapshot_path) {
            Ok(existing) if existing != snapshot => {
                return Err(HarnessError::SnapshotMismatch(snapshot_path));
            }
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                write_atomic(&snapshot_path, snapshot.as_bytes())?;
            }
            Err(e) => return Err(io_err(&snapshot_path, e)),
        }

        let checkpoint_path = root.join(CHECKPOINT_FILE);
        let checkpoint: Checkpoint = match std::fs::read_to_string(&checkpoint_path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| HarnessError::Corrupt(format!("{}: {e}", checkpoint_path.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Checkpoint {
                schema_version: CHECKPOINT_SCHEMA_VERSION,
                completed: BTreeSet::new(),
            },
            Err(e) => return Err(io_err(&checkpoint_path, e)),
        };
        if checkpoint.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(HarnessError::Corrupt(format!(
                "checkpoint schema_version {}",
                checkpoint.schema_version
            )));
        }

        let traces: Vec<RefinementTrace> = read_json_lines::<RefinementTrace>(&root.join(TRACES_FILE))?
            .into_iter()
            .filter(|t| checkpoint.completed.contains(&t.key()))
            .collect();
        let mut seen = HashSet::new();
        let traces: Vec<RefinementTrace> = traces.into_iter().filter(|t| seen.insert(t.key())).collect();
        if traces.len() != checkpoint.completed.len() {
            return Err(HarnessError::Corrupt(format!(
                "checkpoint lists {} branches but {} traces were found",
                checkpoint.completed.len(),
                traces.len()
            )));
        }
        let drafts: Vec<DraftRecord> = read_json_lines(&root.join(DRAFTS_FILE))?;
        let stories: Vec<StoryRecord> = read_json_lines(&root.join(STORIES_FILE))?;
        let failures: Vec<BranchFailure> = read_json_lines(&root.join(FAILURES_FILE))?;

        write_atomic(
            &checkpoint_path,
            &serde_json::to_vec_pretty(&checkpoint).expect("checkpoint serialises"),
        )?;
        // Rewrite every stream with only the recovered content.
        let header = ResultsHeader {
            schema_version: RESULTS_SCHEMA_VERSION,
            writer: config.writer.clone(),
            editors: config.editors.clone(),
        };
        write_results(&root.join(RESULTS_FILE), &header, &traces)?;
        rewrite_lines(&root.join(TRACES_FILE), &traces)?;
        rewrite_lines(&root.join(DRAFTS_FILE), &drafts)?;
        rewrite_lines(&root.join(STORIES_FILE), &stories)?;
        rewrite_lines(&root.join(FAILURES_FILE), &failures)?;

        let files = RunFiles {
            root: root.to_path_buf(),
            results: open_append(&root.join(RESULTS_FILE))?,
            stories: open_append(&root.join(STORIES_FILE))?,
            traces: open_append(&root.join(TRACES_FILE))?,
            failures: open_append(&root.join(FAILURES_FILE))?,
            drafts: open_append(&root.join(DRAFTS_FILE))?,
            known_stories: stories.into_iter().map(|s| s.hash).collect(),
            checkpoint: checkpoint.clone(),
        };
        Ok((
            files,
            PriorRun {
                checkpoint,
                traces,
                drafts,
            },
        ))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn add_story(&mut self, text: &str) -> Result<(), HarnessError> {
        let hash = crate::domain::story_hash(text);
        if self.known_stories.insert(hash.clone()) {
            let record = StoryRecord {
                hash,
                text: text.to_string(),
            };
            write_json_line(&mut self.stories, &record).map_err(|e| io_err(&self.path(STORIES_FILE), e))?;
        }
        Ok(())
    }

    pub fn record_draft(&mut self, record: &DraftRecord) -> Result<(), HarnessError> {
        self.add_story(&record.draft.story.text)?;
        write_json_line(&mut self.drafts, record).map_err(|e| io_err(&self.path(DRAFTS_FILE), e))?;
        self.stories.flush().map_err(|e| io_err(&self.path(STORIES_FILE), e))?;
        self.drafts.flush().map_err(|e| io_err(&self.path(DRAFTS_FILE), e))
    }

    /// Persists a completed branch, then marks it in the checkpoint.
    pub fn record_trace(&mut self, trace: &RefinementTrace) -> Result<(), HarnessError> {
        for it in &trace.iterations {
            self.add_story(&it.story.text)?;
        }
        for line in result_lines(trace) {
            write_json_line(&mut self.results, &line).map_err(|e| io_err(&self.path(RESULTS_FILE), e))?;
        }
        write_json_line(&mut self.traces, trace).map_err(|e| io_err(&self.path(TRACES_FILE), e))?;
        for (w, name) in [
            (&mut self.stories, STORIES_FILE),
            (&mut self.results, RESULTS_FILE),
            (&mut self.traces, TRACES_FILE),
        ] {
            w.flush().map_err(|e| io_err(&self.root.join(name), e))?;
        }
        self.checkpoint.completed.insert(trace.key());
        let json = serde_json::to_vec_pretty(&self.checkpoint).expect("checkpoint serialises");
        write_atomic(&self.path(CHECKPOINT_FILE), &json)
    }

    pub fn record_failure(&mut self, failure: &BranchFailure) -> Result<(), HarnessError> {
        write_json_line(&mut self.failures, failure).map_err(|e| io_err(&self.path(FAILURES_FILE), e))?;
        self.failures.flush().map_err(|e| io_err(&self.path(FAILURES_FILE), e))
    }
}

fn rewrite_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<(), HarnessError> {
    let mut buf = Vec::new();
    for item in items {
        write_json_line(&mut buf, item).map_err(|e| io_err(path, e))?;
    }
    write_atomic(path, &buf)
}

/// Story texts by hash from a run directory.
pub fn load_stories(root: &Path) -> Result<std::collections::HashMap<String, String>, HarnessError> {
    Ok(read_json_lines::<StoryRecord>(&root.join(STORIES_FILE))?
        .into_iter()
        .map(|s| (s.hash, s.text))
        .collect())
}
