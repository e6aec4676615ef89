//! The interactive session state machine, free of I/O.
//!
//! ```text
//! selecting --(5th tile)--> ready --start--> looping --iteration--> awaiting_decision
//!                                              |  ^                     |      |
//!                                              |  +------continue-------+      +--accept--> accepted
//!                                              +--error--> failed
//! ```

use crate::domain::{
    best_iteration, Critique, ElementKind, Iteration, RefinementTrace, SpecialAppearance, Story, TileCatalog,
    TileTuple,
};
use crate::prompts::GuidanceContext;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Selecting,
    Ready,
    Looping,
    AwaitingDecision,
    Accepted,
    Failed,
}

impl SessionState {
    pub fn key(self) -> &'static str {
        match self {
            SessionState::Selecting => "selecting",
            SessionState::Ready => "ready",
            SessionState::Looping => "looping",
            SessionState::AwaitingDecision => "awaiting_decision",
            SessionState::Accepted => "accepted",
            SessionState::Failed => "failed",
        }
    }

    /// Whether the transition table allows `self -> next`.
    pub fn can_become(self, next: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, next),
            (Selecting, Ready)
                | (Ready, Looping)
                | (Looping, AwaitingDecision)
                | (Looping, Failed)
                | (AwaitingDecision, Looping)
                | (AwaitingDecision, Accepted)
        )
    }
}

impl std::fmt::Display for SessionState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopMode {
    /// Pause for a human decision after every iteration.
    #[default]
    Steer,
    /// Run the full stop policy without pausing.
    Auto,
}

impl std::str::FromStr for LoopMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "steer" => Ok(LoopMode::Steer),
            "auto" => Ok(LoopMode::Auto),
            other => Err(format!("unknown mode `{other}` (expected steer or auto)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SessionError {
    #[error("unknown element kind `{0}`")]
    InvalidKind(String),
    #[error("`{label}` is not a {kind} tile")]
    InvalidLabel { kind: String, label: String },
    #[error("{0} is already chosen")]
    DuplicateKind(String),
    #[error("cannot {op} while {state}")]
    WrongState { op: &'static str, state: SessionState },
    #[error("iteration {index} does not exist (have {available})")]
    BadIndex { index: u32, available: u32 },
    #[error("already at the maximum of {0} loops")]
    MaxLoopsReached(u32),
    #[error("no session `{0}`")]
    NotFound(String),
    #[error("model call failed: {0}")]
    Upstream(String),
    #[error("{0}")]
    BadRequest(String),
}

impl SessionError {
    /// Machine-readable code for error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::InvalidKind(_) => "invalid_kind",
            SessionError::InvalidLabel { .. } => "invalid_label",
            SessionError::DuplicateKind(_) => "duplicate_kind",
            SessionError::WrongState { .. } => "wrong_state",
            SessionError::BadIndex { .. } => "bad_index",
            SessionError::MaxLoopsReached(_) => "max_loops_reached",
            SessionError::NotFound(_) => "not_found",
            SessionError::Upstream(_) => "upstream_error",
            SessionError::BadRequest(_) => "bad_request",
        }
    }
}

/// One completed iteration as announced to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationEvent {
    pub session_id: String,
    pub loop_index: u32,
    pub story: String,
    pub score: f64,
    pub rationale: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub state: SessionState,
    pub tiles: BTreeMap<ElementKind, String>,
    pub trace: Option<RefinementTrace>,
    pub mode: Option<LoopMode>,
    pub max_loops: u32,
    /// Loop index of the accepted story.
    pub accepted: Option<u32>,
    pub failure: Option<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    /// Start of the current idle period during tile selection.
    pub idle_since: DateTime<Utc>,
}

impl Session {
    pub fn new(id: String, max_loops: u32, now: DateTime<Utc>) -> Session {
        Session {
            id,
            state: SessionState::Selecting,
            tiles: BTreeMap::new(),
            trace: None,
            mode: None,
            max_loops: max_loops.max(1),
            accepted: None,
            failure: None,
            created_at: now,
            updated_at: now,
            idle_since: now,
        }
    }

    fn require(&self, op: &'static str, allowed: &[SessionState]) -> Result<(), SessionError> {
        if allowed.contains(&self.state) {
            Ok(())
        } else {
            Err(SessionError::WrongState { op, state: self.state })
        }
    }

    fn become_(&mut self, next: SessionState, now: DateTime<Utc>) {
        debug_assert!(self.state.can_become(next), "{} -> {}", self.state, next);
        self.state = next;
        self.updated_at = now;
    }

    pub fn iteration_count(&self) -> u32 {
        self.trace.as_ref().map_or(0, |t| t.iterations.len() as u32)
    }

    /// The next element the players have to choose, in board order.
    pub fn next_stage(&self) -> Option<ElementKind> {
        ElementKind::PLAYER_SELECTED
            .into_iter()
            .find(|k| !self.tiles.contains_key(k))
    }

    pub fn submit_tile(
        &mut self,
        kind: &str,
        label: &str,
        catalog: &TileCatalog,
        now: DateTime<Utc>,
    ) -> Result<(), SessionError> {
        self.require("submit a tile", &[SessionState::Selecting])?;
        let kind = ElementKind::from_key(kind)
            .filter(|k| k.is_player_selected())
            .ok_or_else(|| SessionError::InvalidKind(kind.to_string()))?;
        if self.tiles.contains_key(&kind) {
            return Err(SessionError::DuplicateKind(kind.key().to_string()));
        }
        if !catalog.contains(kind, label) {
            return Err(SessionError::InvalidLabel {
                kind: kind.key().to_string(),
                label: label.to_string(),
            });
        }
        self.tiles.insert(kind, label.to_string());
        self.updated_at = now;
        self.idle_since = now;
        if self.next_stage().is_none() {
            self.become_(SessionState::Ready, now);
        }
        Ok(())
    }

    pub fn hint_context(&self, now: DateTime<Utc>, idle_threshold: Duration) -> Result<GuidanceContext, SessionError> {
        self.require("ask for a hint", &[SessionState::Selecting])?;
        let stage = self.next_stage().expect("selecting sessions have an unfilled element");
        let idle = (now - self.idle_since).to_std().unwrap_or_default();
        Ok(GuidanceContext {
            stage,
            idle,
            idle_threshold,
        })
    }

    /// The tuple the players built; the special appearance is left to the Writer.
    pub fn tuple(&self) -> Option<TileTuple> {
        let get = |k| self.tiles.get(&k).cloned();
        Some(TileTuple {
            protagonist: get(ElementKind::Protagonist)?,
            location: get(ElementKind::Location)?,
            mood: get(ElementKind::Mood)?,
            important_object: get(ElementKind::ImportantObject)?,
            activity: get(ElementKind::Activity)?,
            special_appearance: SpecialAppearance::AiChosen,
        })
    }

    /// `ready -> looping` (creating the trace) or `awaiting_decision -> looping`.
    pub fn start_loop(
        &mut self,
        mode: LoopMode,
        writer: &str,
        editor: &str,
        now: DateTime<Utc>,
    ) -> Result<(), SessionError> {
        self.require("start the loop", &[SessionState::Ready, SessionState::AwaitingDecision])?;
        if self.iteration_count() >= self.max_loops {
            return Err(SessionError::MaxLoopsReached(self.max_loops));
        }
        if self.trace.is_none() {
            let tuple = self.tuple().expect("ready sessions have a full tuple");
            self.trace = Some(RefinementTrace::new(tuple, writer, editor));
        }
        self.mode = Some(mode);
        self.become_(SessionState::Looping, now);
        Ok(())
    }

    /// Steer-mode `continue`: one more iteration.
    pub fn continue_loop(&mut self, now: DateTime<Utc>) -> Result<(), SessionError> {
        self.require("continue", &[SessionState::AwaitingDecision])?;
        let (writer, editor) = {
            let t = self.trace.as_ref().expect("awaiting sessions have a trace");
            (t.writer_model.clone(), t.editor_model.clone())
        };
        self.start_loop(LoopMode::Steer, &writer, &editor, now)
    }

    pub fn record_iteration(&mut self, iteration: Iteration, now: DateTime<Utc>) -> Result<IterationEvent, SessionError> {
        self.require("record an iteration", &[SessionState::Looping])?;
        let trace = self.trace.as_mut().expect("looping sessions have a trace");
        let expected = trace.iterations.len() as u32 + 1;
        if iteration.loop_index() != expected {
            return Err(SessionError::BadIndex {
                index: iteration.loop_index(),
                available: expected - 1,
            });
        }
        let event = IterationEvent {
            session_id: self.id.clone(),
            loop_index: iteration.loop_index(),
            story: iteration.story.text.clone(),
            score: iteration.critique.score,
            rationale: iteration.critique.rationale.clone(),
            timestamp: now,
        };
        trace.push(iteration);
        self.updated_at = now;
        Ok(event)
    }

    /// `looping -> awaiting_decision`, after at least one iteration.
    pub fn pause(&mut self, now: DateTime<Utc>) -> Result<(), SessionError> {
        self.require("pause", &[SessionState::Looping])?;
        if self.iteration_count() == 0 {
            return Err(SessionError::BadIndex { index: 1, available: 0 });
        }
        self.become_(SessionState::AwaitingDecision, now);
        Ok(())
    }

    pub fn fail(&mut self, reason: String, now: DateTime<Utc>) -> Result<(), SessionError> {
        self.require("fail", &[SessionState::Looping])?;
        if let Some(t) = self.trace.as_mut() {
            t.status = crate::domain::TraceStatus::Aborted { reason: reason.clone() };
        }
        self.failure = Some(reason);
        self.become_(SessionState::Failed, now);
        Ok(())
    }

    /// Engine's pick: the earliest iteration with the top score.
    pub fn recommended(&self) -> Option<u32> {
        self.trace
            .as_ref()
            .and_then(|t| best_iteration(&t.scores()))
            .map(|i| i as u32 + 1)
    }

    /// Accepts iteration `index` (1-based), or the recommendation when `None`.
    pub fn accept(&mut self, index: Option<u32>, now: DateTime<Utc>) -> Result<Story, SessionError> {
        self.require("accept", &[SessionState::AwaitingDecision])?;
        let available = self.iteration_count();
        let index = match index {
            Some(i) => i,
            None => self.recommended().expect("awaiting sessions have iterations"),
        };
        if index == 0 || index > available {
            return Err(SessionError::BadIndex { index, available });
        }
        let story = self.trace.as_ref().expect("trace")
            .iterations[index as usize - 1]
            .story
            .clone();
        self.accepted = Some(index);
        self.become_(SessionState::Accepted, now);
        Ok(story)
    }

    pub fn critiques(&self) -> Vec<(&Story, &Critique)> {
        self.trace
            .iter()
            .flat_map(|t| t.iterations.iter().map(|it| (&it.story, &it.critique)))
            .collect()
    }
}
