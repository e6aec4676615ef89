//! The Writer-Editor loop.
//!
//! Each iteration renders a Writer prompt (zero-shot on the first loop, the
//! first prompt plus the previous story and critique afterwards), asks the
//! Editor to grade the result and parses the overall score. Every model call
//! is a fresh one-message conversation; all context travels in the prompt.

mod score;

pub use score::{extract_score, rationale_of, ScoreError, ScoreParse, ScoreRule};

use crate::domain::{
    best_iteration, Critique, Iteration, IterationTimings, RefinementTrace, Story, TileTuple,
    TraceStatus,
};
use crate::gateway::{Gateway, GatewayError, ModelHandle};
use crate::prompts::{PromptForge, TemplateError, FORMAT_REMINDER};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum StopPolicy {
    /// Always run `max_loops` iterations.
    FixedHorizon,
    /// Stop as soon as a score reaches the threshold (percent).
    ScoreThreshold { threshold: f64 },
    /// Stop once `patience` consecutive iterations fail to beat the best score.
    NoImprovement { patience: u32 },
}

/// How much history the subsequent-loop Editor sees.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditorHistory {
    /// Only the immediately previous story and critique.
    #[default]
    Last,
    /// Every earlier story and critique.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub max_loops: u32,
    pub stop_policy: StopPolicy,
    pub parse_retry_limit: u32,
    #[serde(default)]
    pub editor_history: EditorHistory,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            max_loops: 5,
            stop_policy: StopPolicy::FixedHorizon,
            parse_retry_limit: 2,
            editor_history: EditorHistory::Last,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LoopConfigError {
    #[error("max_loops must be at least 1")]
    ZeroLoops,
    #[error("score threshold {0} must lie in (0, 100]")]
    Threshold(f64),
    #[error("patience must be at least 1")]
    ZeroPatience,
}

impl LoopConfig {
    pub fn fixed(max_loops: u32) -> LoopConfig {
        LoopConfig {
            max_loops,
            ..LoopConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), LoopConfigError> {
        if self.max_loops == 0 {
            return Err(LoopConfigError::ZeroLoops);
        }
        match self.stop_policy {
            StopPolicy::ScoreThreshold { threshold } if !(threshold > 0.0 && threshold <= 100.0) => {
                Err(LoopConfigError::Threshold(threshold))
            }
            StopPolicy::NoImprovement { patience: 0 } => Err(LoopConfigError::ZeroPatience),
            _ => Ok(()),
        }
    }

    /// Whether the loop should stop after the iterations scored so far.
    pub fn should_stop(&self, scores: &[f64]) -> bool {
        let k = scores.len();
        if k >= self.max_loops as usize {
            return true;
        }
        let Some(&last) = scores.last() else {
            return false;
        };
        match self.stop_policy {
            StopPolicy::FixedHorizon => false,
            StopPolicy::ScoreThreshold { threshold } => last >= threshold,
            StopPolicy::NoImprovement { patience } => {
                let best = best_iteration(scores).expect("non-empty");
                k - 1 - best >= patience as usize
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BranchError {
    #[error("editor output unparseable after {attempts} attempts: {last}")]
    Parse { attempts: u32, last: ScoreError },
    #[error(transparent)]
    Transport(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("invalid loop input: {0}")]
    Precondition(String),
}

impl BranchError {
    /// Short machine-readable reason category.
    pub fn kind(&self) -> &'static str {
        match self {
            BranchError::Parse { .. } => "parse",
            BranchError::Transport(_) => "transport",
            BranchError::Template(_) => "template",
            BranchError::Precondition(_) => "precondition",
        }
    }
}

/// A branch that stopped early. `partial` holds the iterations that completed.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("branch failed after {} iterations: {cause}", partial.iterations.len())]
pub struct BranchFailed {
    pub cause: BranchError,
    pub partial: RefinementTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("trace has no iterations")]
pub struct EmptyTrace;

/// The story the loop settles on: the earliest iteration with the top score.
pub fn select_final_story(trace: &RefinementTrace) -> Result<&Story, EmptyTrace> {
    let best = best_iteration(&trace.scores()).ok_or(EmptyTrace)?;
    Ok(&trace.iterations[best].story)
}

/// A story written by the Writer, with the prompt that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draft {
    pub story: Story,
    pub prompt: String,
    pub elapsed_ms: u64,
}

/// An Editor verdict, with the prompt actually sent (including any format reminders).
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub critique: Critique,
    pub prompt: String,
    pub parse_retries: u32,
    pub elapsed_ms: u64,
}

pub fn assemble(draft: Draft, verdict: Verdict) -> Iteration {
    Iteration {
        story: draft.story,
        critique: verdict.critique,
        writer_prompt: draft.prompt,
        editor_prompt: verdict.prompt,
        parse_retries: verdict.parse_retries,
        timings: IterationTimings {
            writer_ms: draft.elapsed_ms,
            editor_ms: verdict.elapsed_ms,
        },
    }
}

#[derive(Clone)]
pub struct Engine {
    gateway: Arc<Gateway>,
    forge: Arc<PromptForge>,
}

impl Engine {
    pub fn new(gateway: Arc<Gateway>, forge: Arc<PromptForge>) -> Engine {
        Engine { gateway, forge }
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn forge(&self) -> &PromptForge {
        &self.forge
    }

    /// Writes the story for `loop_index`: zero-shot when `prior` is `None`, otherwise a revision.
    pub async fn write_story(
        &self,
        writer: &ModelHandle,
        tuple: &TileTuple,
        prior: Option<(&Story, &Critique)>,
        loop_index: u32,
    ) -> Result<Draft, BranchError> {
        let prompt = match prior {
            None => self.forge.render_writer_first(tuple)?,
            Some((story, critique)) => self.forge.render_writer_subsequent(tuple, story, critique)?,
        };
        let started = Instant::now();
        let text = self.gateway.complete(writer, &prompt).await?;
        let elapsed_ms = started.elapsed().as_millis() as u64;
        if text.trim().is_empty() {
            return Err(BranchError::Transport(GatewayError::Transport {
                status: None,
                message: format!("writer `{}` returned an empty story", writer.name),
            }));
        }
        Ok(Draft {
            story: Story {
                text,
                writer_model: writer.name.clone(),
                loop_index,
                tuple_ref: tuple.id(),
            },
            prompt,
            elapsed_ms,
        })
    }

    /// Grades `story`. `history` holds earlier iterations, oldest first; empty on the first loop.
    ///
    /// An unparseable answer is re-requested with a format reminder up to `retry_limit` times.
    pub async fn evaluate_story(
        &self,
        editor: &ModelHandle,
        tuple: &TileTuple,
        story: &Story,
        history: &[(&Story, &Critique)],
        retry_limit: u32,
    ) -> Result<Verdict, BranchError> {
        let base = if history.is_empty() {
            self.forge.render_editor_first(tuple, story)?
        } else {
            self.forge.render_editor_with_history(tuple, story, history)?
        };
        let started = Instant::now();
        let mut prompt = base;
        let mut attempt = 0;
        loop {
            let raw = self.gateway.complete(editor, &prompt).await?;
            match extract_score(&raw) {
                Ok(parse) => {
                    return Ok(Verdict {
                        critique: Critique {
                            score: parse.value,
                            rationale: rationale_of(&raw, &parse),
                            editor_model: editor.name.clone(),
                            raw_text: raw,
                        },
                        prompt,
                        parse_retries: attempt,
                        elapsed_ms: started.elapsed().as_millis() as u64,
                    })
                }
                Err(err) if attempt < retry_limit => {
                    tracing::debug!(editor = %editor.name, attempt, error = %err, "re-asking editor");
                    attempt += 1;
                    if !prompt.ends_with(FORMAT_REMINDER) {
                        prompt.push_str(FORMAT_REMINDER);
                    }
                }
                Err(err) => {
                    return Err(BranchError::Parse {
                        attempts: attempt + 1,
                        last: err,
                    })
                }
            }
        }
    }

    /// One Writer-Editor loop. `prior` must be present exactly when `loop_index > 1`.
    pub async fn run_iteration(
        &self,
        writer: &ModelHandle,
        editor: &ModelHandle,
        tuple: &TileTuple,
        prior: Option<(&Story, &Critique)>,
        loop_index: u32,
        config: &LoopConfig,
    ) -> Result<Iteration, BranchError> {
        if loop_index == 0 || (loop_index == 1) != prior.is_none() {
            return Err(BranchError::Precondition(format!(
                "loop_index {loop_index} with prior {}",
                if prior.is_some() { "present" } else { "absent" }
            )));
        }
        let draft = self.write_story(writer, tuple, prior, loop_index).await?;
        let history: Vec<_> = prior.into_iter().collect();
        let verdict = self
            .evaluate_story(editor, tuple, &draft.story, &history, config.parse_retry_limit)
            .await?;
        Ok(assemble(draft, verdict))
    }

    async fn next_iteration(
        &self,
        writer: &ModelHandle,
        editor: &ModelHandle,
        trace: &RefinementTrace,
        config: &LoopConfig,
    ) -> Result<Iteration, BranchError> {
        let previous = trace.iterations.last().expect("seeded trace");
        let loop_index = trace.iterations.len() as u32 + 1;
        let draft = self
            .write_story(
                writer,
                &trace.tuple,
                Some((&previous.story, &previous.critique)),
                loop_index,
            )
            .await?;
        let history: Vec<(&Story, &Critique)> = match config.editor_history {
            EditorHistory::Last => vec![(&previous.story, &previous.critique)],
            EditorHistory::Full => trace
                .iterations
                .iter()
                .map(|it| (&it.story, &it.critique))
                .collect(),
        };
        let verdict = self
            .evaluate_story(editor, &trace.tuple, &draft.story, &history, config.parse_retry_limit)
            .await?;
        Ok(assemble(draft, verdict))
    }

    /// Runs loops until the stop policy fires. A `seed` becomes iteration 1 unchanged.
    pub async fn run_loop(
        &self,
        writer: &ModelHandle,
        editor: &ModelHandle,
        tuple: &TileTuple,
        config: &LoopConfig,
        seed: Option<Iteration>,
    ) -> Result<RefinementTrace, BranchFailed> {
        let mut trace = RefinementTrace::new(tuple.clone(), &writer.name, &editor.name);
        let fail = |cause: BranchError, mut partial: RefinementTrace| {
            partial.status = TraceStatus::Aborted {
                reason: cause.to_string(),
            };
            BranchFailed { cause, partial }
        };
        if let Err(e) = config.validate() {
            return Err(fail(BranchError::Precondition(e.to_string()), trace));
        }
        if let Err(e) = tuple.validate() {
            return Err(fail(BranchError::Precondition(e.to_string()), trace));
        }
        let first = match seed {
            Some(it) if it.loop_index() == 1 => it,
            Some(it) => {
                let msg = format!("seed iteration has loop_index {}", it.loop_index());
                return Err(fail(BranchError::Precondition(msg), trace));
            }
            None => match self.run_iteration(writer, editor, tuple, None, 1, config).await {
                Ok(it) => it,
                Err(e) => return Err(fail(e, trace)),
            },
        };
        trace.push(first);
        while !config.should_stop(&trace.scores()) {
            match self.next_iteration(writer, editor, &trace, config).await {
                Ok(it) => trace.push(it),
                Err(e) => return Err(fail(e, trace)),
            }
        }
        Ok(trace)
    }

    /// Continues an existing trace by one iteration. Used by interactive sessions.
    pub async fn extend(
        &self,
        writer: &ModelHandle,
        editor: &ModelHandle,
        trace: &RefinementTrace,
        config: &LoopConfig,
    ) -> Result<Iteration, BranchError> {
        if trace.iterations.is_empty() {
            self.run_iteration(writer, editor, &trace.tuple, None, 1, config)
                .await
        } else {
            self.next_iteration(writer, editor, trace, config).await
        }
    }
}
