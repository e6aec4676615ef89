#![allow(dead_code)]

use fableloop::analytics::{EventTime, MortalityEvent};
use fableloop::domain::{BranchKey, TileTuple, TupleId};
use fableloop::engine::{extract_score, Engine, ScoreError, ScoreRule};
use fableloop::gateway::{Gateway, ModelHandle};
use fableloop::prompts::PromptForge;
use rand::Rng;
use serde::Deserialize;
use std::sync::Arc;

pub fn engine() -> Engine {
    Engine::new(Arc::new(Gateway::default()), Arc::new(PromptForge::builtin()))
}

pub fn tuple() -> TileTuple {
    TileTuple::parse_inline(
        "protagonist=a cat; location=a kitchen in a private home; mood=cozy; \
         important_object=a red ball; activity=baking",
    )
    .unwrap()
}

pub fn critique(score: f64) -> String {
    format!("The tiles are present and the ending lands.\nOverall Score: {score}%")
}

/// A Writer returning `story 1`, `story 2`, ...
pub fn scripted_writer(n: usize) -> ModelHandle {
    ModelHandle::scripted("writer", (1..=n).map(|i| format!("story {i}")))
}

pub fn scripted_editor(scores: &[f64]) -> ModelHandle {
    ModelHandle::scripted("editor", scores.iter().map(|&s| critique(s)))
}

#[derive(Debug, Deserialize)]
pub struct CorpusCase {
    pub name: String,
    pub text: String,
    pub value: Option<f64>,
    pub rule: Option<ScoreRule>,
    pub error: Option<String>,
    pub detail: Option<f64>,
}

#[derive(Deserialize)]
struct Corpus {
    case: Vec<CorpusCase>,
}

pub fn score_corpus() -> Vec<CorpusCase> {
    let text = include_str!("../fixtures/score_corpus.toml");
    toml::from_str::<Corpus>(text).expect("corpus parses").case
}

/// Whether `extract_score` agrees with the fixture.
pub fn check_case(case: &CorpusCase) -> Result<(), String> {
    let got = extract_score(&case.text);
    let ok = match (&got, case.value, case.error.as_deref()) {
        (Ok(p), Some(v), None) => {
            p.value == v
                && Some(p.rule) == case.rule
                && case.text[p.source_span.clone()].parse::<f64>().ok() == Some(v)
        }
        (Err(ScoreError::OutOfRange(x)), None, Some("out_of_range")) => Some(*x) == case.detail,
        (Err(ScoreError::AmbiguousScore(n)), None, Some("ambiguous")) => Some(*n as f64) == case.detail,
        (Err(ScoreError::NoScoreFound), None, Some("no_score")) => true,
        (Err(ScoreError::EmptyInput), None, Some("empty")) => true,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(format!("`{}`: got {got:?}", case.name))
    }
}

/// `n` branches whose transitions each fail with probability `hazard`,
/// observed over `horizon` loops (`horizon - 1` transitions).
pub fn simulate_cohort(
    rng: &mut impl Rng,
    editor: &str,
    n: usize,
    hazard: f64,
    horizon: u32,
) -> Vec<MortalityEvent> {
    (0..n)
        .map(|i| {
            let time = (1..horizon)
                .find(|_| rng.random::<f64>() < hazard)
                .map_or(EventTime::Censored { period: horizon - 1 }, |period| {
                    EventTime::Event { period }
                });
            MortalityEvent {
                branch: BranchKey {
                    tuple_id: TupleId(format!("{editor}-{i}")),
                    editor: editor.to_string(),
                },
                horizon,
                time,
            }
        })
        .collect()
}
