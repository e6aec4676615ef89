use super::GatewayError;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

pub const TRANSCRIPT_SCHEMA_VERSION: u32 = 1;

/// One model call, as stored in a transcript JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub schema_version: u32,
    pub model: String,
    pub prompt: String,
    pub response: String,
    pub timestamp: DateTime<Utc>,
    pub latency_ms: u64,
}

/// Append-only transcript writer. One line per call, flushed immediately.
pub struct TranscriptRecorder {
    file: Mutex<File>,
}

impl TranscriptRecorder {
    pub fn open(path: &Path) -> std::io::Result<TranscriptRecorder> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(TranscriptRecorder {
            file: Mutex::new(file),
        })
    }

    pub fn append(&self, entry: &TranscriptEntry) -> std::io::Result<()> {
        let mut line = serde_json::to_string(entry)?;
        line.push('\n');
        let mut file = self.file.lock().unwrap();
        file.write_all(line.as_bytes())?;
        file.flush()
    }
}

pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptEntry>, GatewayError> {
    let file = File::open(path).map_err(|e| GatewayError::Transcript(e.to_string()))?;
    let mut entries = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| GatewayError::Transcript(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: TranscriptEntry = serde_json::from_str(&line)
            .map_err(|e| GatewayError::Transcript(format!("line {}: {e}", n + 1)))?;
        if entry.schema_version != TRANSCRIPT_SCHEMA_VERSION {
            return Err(GatewayError::Transcript(format!(
                "line {}: unsupported schema version {}",
                n + 1,
                entry.schema_version
            )));
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Recorded responses served back in place of a live model.
///
/// Strict mode walks each model's entries in recorded order and fails on the
/// first prompt that differs. Lenient mode looks responses up by exact prompt,
/// which tolerates reordering between concurrent branches.
pub struct ReplayLog {
    strict: bool,
    state: Mutex<ReplayState>,
}

struct ReplayState {
    by_model: HashMap<String, VecDeque<TranscriptEntry>>,
    consumed: HashMap<String, usize>,
    by_prompt: HashMap<(String, String), VecDeque<String>>,
}

impl ReplayLog {
    pub fn new(entries: Vec<TranscriptEntry>, strict: bool) -> ReplayLog {
        let mut by_model: HashMap<String, VecDeque<TranscriptEntry>> = HashMap::new();
        let mut by_prompt: HashMap<(String, String), VecDeque<String>> = HashMap::new();
        for e in entries {
            by_prompt
                .entry((e.model.clone(), e.prompt.clone()))
                .or_default()
                .push_back(e.response.clone());
            by_model.entry(e.model.clone()).or_default().push_back(e);
        }
        ReplayLog {
            strict,
            state: Mutex::new(ReplayState {
                by_model,
                consumed: HashMap::new(),
                by_prompt,
            }),
        }
    }

    pub fn load(path: &Path, strict: bool) -> Result<ReplayLog, GatewayError> {
        Ok(ReplayLog::new(read_transcript(path)?, strict))
    }

    pub(super) fn next(&self, model: &str, prompt: &str) -> Result<String, GatewayError> {
        let mut state = self.state.lock().unwrap();
        if self.strict {
            let position = *state.consumed.get(model).unwrap_or(&0);
            let queue = state
                .by_model
                .get_mut(model)
                .ok_or_else(|| GatewayError::ReplayExhausted(model.to_string()))?;
            match queue.front() {
                None => Err(GatewayError::ReplayExhausted(model.to_string())),
                Some(entry) if entry.prompt != prompt => Err(GatewayError::ReplayMismatch {
                    model: model.to_string(),
                    position,
                }),
                Some(_) => {
                    let entry = queue.pop_front().expect("front exists");
                    *state.consumed.entry(model.to_string()).or_insert(0) += 1;
                    Ok(entry.response)
                }
            }
        } else {
            state
                .by_prompt
                .get_mut(&(model.to_string(), prompt.to_string()))
                .and_then(VecDeque::pop_front)
                .ok_or_else(|| GatewayError::ReplayExhausted(model.to_string()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, ModelHandle};
    use std::sync::Arc;

    fn entry(model: &str, prompt: &str, response: &str) -> TranscriptEntry {
        TranscriptEntry {
            schema_version: TRANSCRIPT_SCHEMA_VERSION,
            model: model.into(),
            prompt: prompt.into(),
            response: response.into(),
            timestamp: Utc::now(),
            latency_ms: 3,
        }
    }

    #[tokio::test]
    async fn strict_replay_rejects_prompt_mismatch() {
        let log = Arc::new(ReplayLog::new(vec![entry("ed", "rate this", "Overall Score: 70%")], true));
        let gw = Gateway::default();
        let m = ModelHandle::replay("ed", log);
        assert_eq!(
            gw.complete(&m, "rate that").await,
            Err(GatewayError::ReplayMismatch {
                model: "ed".into(),
                position: 0
            })
        );
        assert_eq!(gw.complete(&m, "rate this").await.unwrap(), "Overall Score: 70%");
        assert_eq!(
            gw.complete(&m, "rate this").await,
            Err(GatewayError::ReplayExhausted("ed".into()))
        );
    }

    #[tokio::test]
    async fn lenient_replay_matches_by_prompt() {
        let log = Arc::new(ReplayLog::new(
            vec![entry("w", "p1", "r1"), entry("w", "p2", "r2")],
            false,
        ));
        let gw = Gateway::default();
        let m = ModelHandle::replay("w", log);
        assert_eq!(gw.complete(&m, "p2").await.unwrap(), "r2");
        assert_eq!(gw.complete(&m, "p1").await.unwrap(), "r1");
    }

    #[tokio::test]
    async fn recorder_appends_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let rec = Arc::new(TranscriptRecorder::open(&path).unwrap());
        let gw = Gateway::default().with_recorder(rec);
        let m = ModelHandle::scripted("w", ["one", "two"]);
        gw.complete(&m, "a").await.unwrap();
        gw.complete(&m, "b").await.unwrap();
        let entries = read_transcript(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[1].prompt, "b");
        assert_eq!(entries[1].response, "two");
        assert_eq!(entries[0].schema_version, TRANSCRIPT_SCHEMA_VERSION);
    }
}
