use crate::domain::{BranchKey, RefinementTrace};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// When a branch first failed to improve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventTime {
    /// Transition `period -> period + 1` did not improve.
    Event { period: u32 },
    /// Improved at every transition; observed through `period` = horizon - 1.
    Censored { period: u32 },
}

impl EventTime {
    pub fn last_period(self) -> u32 {
        match self {
            EventTime::Event { period } | EventTime::Censored { period } => period,
        }
    }

    pub fn is_event(self) -> bool {
        matches!(self, EventTime::Event { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MortalityEvent {
    pub branch: BranchKey,
    /// Loops observed for the branch.
    pub horizon: u32,
    pub time: EventTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("need at least two loops to observe an improvement, got {0}")]
pub struct TooShort(pub usize);

/// What counts as surviving a transition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImprovementRule {
    /// The next score must be strictly higher; a tie is a failure.
    #[default]
    Strict,
    /// Only a decline is a failure.
    AllowTies,
}

impl ImprovementRule {
    pub fn from_strict(strict: bool) -> Self {
        if strict {
            ImprovementRule::Strict
        } else {
            ImprovementRule::AllowTies
        }
    }

    fn survives(self, before: f64, after: f64) -> bool {
        match self {
            ImprovementRule::Strict => after > before,
            ImprovementRule::AllowTies => after >= before,
        }
    }
}

/// First transition at which `scores` fails to improve.
pub fn first_failure(scores: &[f64], rule: ImprovementRule) -> Result<EventTime, TooShort> {
    if scores.len() < 2 {
        return Err(TooShort(scores.len()));
    }
    let failed = scores
        .windows(2)
        .position(|w| !rule.survives(w[0], w[1]));
    Ok(match failed {
        Some(i) => EventTime::Event { period: i as u32 + 1 },
        None => EventTime::Censored {
            period: scores.len() as u32 - 1,
        },
    })
}

pub fn detect_mortality(
    trace: &RefinementTrace,
    rule: ImprovementRule,
) -> Result<MortalityEvent, TooShort> {
    let scores = trace.scores();
    Ok(MortalityEvent {
        branch: trace.key(),
        horizon: scores.len() as u32,
        time: first_failure(&scores, rule)?,
    })
}

/// One Bernoulli observation: branch `branch` at risk in `period`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonPeriodRecord {
    pub branch: BranchKey,
    pub period: u32,
    pub covariates: Vec<f64>,
    pub event: bool,
}

/// Fixed covariate vectors per Editor, with named columns.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CovariateMap {
    pub names: Vec<String>,
    pub by_editor: BTreeMap<String, Vec<f64>>,
}

impl CovariateMap {
    /// Treatment coding: one indicator per Editor except `editors[0]`, the reference.
    pub fn editor_indicators(editors: &[String]) -> CovariateMap {
        let names: Vec<String> = editors.iter().skip(1).map(|e| format!("editor={e}")).collect();
        let by_editor = editors
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let mut v = vec![0.0; names.len()];
                if i > 0 {
                    v[i - 1] = 1.0;
                }
                (e.clone(), v)
            })
            .collect();
        CovariateMap { names, by_editor }
    }

    pub fn none() -> CovariateMap {
        CovariateMap::default()
    }

    /// Covariates for `editor`; the zero vector when unmapped.
    pub fn vector_for(&self, editor: &str) -> Vec<f64> {
        self.by_editor
            .get(editor)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.names.len()])
    }
}

/// Reshapes event times into one record per branch and period at risk.
pub fn expand_person_periods(
    events: &[MortalityEvent],
    covariates: &CovariateMap,
) -> Vec<PersonPeriodRecord> {
    let mut out = Vec::new();
    for ev in events {
        let x = covariates.vector_for(&ev.branch.editor);
        let last = ev.time.last_period();
        for period in 1..=last {
            out.push(PersonPeriodRecord {
                branch: ev.branch.clone(),
                period,
                covariates: x.clone(),
                event: ev.time.is_event() && period == last,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::TupleId;
    use proptest::prelude::*;

    fn key(i: usize) -> BranchKey {
        BranchKey {
            tuple_id: TupleId(format!("t{i}")),
            editor: "e".into(),
        }
    }

    #[test]
    fn first_non_strict_improvement() {
        let s = ImprovementRule::Strict;
        assert_eq!(
            first_failure(&[70.0, 80.0, 85.0, 85.0, 90.0], s),
            Ok(EventTime::Event { period: 3 })
        );
        assert_eq!(
            first_failure(&[70.0, 80.0, 85.0, 88.0, 91.0], s),
            Ok(EventTime::Censored { period: 4 })
        );
        assert_eq!(
            first_failure(&[74.0, 70.0, 90.0, 95.0, 99.0], s),
            Ok(EventTime::Event { period: 1 })
        );
        assert_eq!(first_failure(&[74.0], s), Err(TooShort(1)));
    }

    #[test]
    fn ties_survive_when_allowed() {
        assert_eq!(
            first_failure(&[70.0, 80.0, 85.0, 85.0, 90.0], ImprovementRule::AllowTies),
            Ok(EventTime::Censored { period: 4 })
        );
        assert_eq!(
            first_failure(&[70.0, 80.0, 79.0], ImprovementRule::AllowTies),
            Ok(EventTime::Event { period: 2 })
        );
    }

    #[test]
    fn expansion_examples() {
        let ev = |t: EventTime| MortalityEvent {
            branch: key(0),
            horizon: 5,
            time: t,
        };
        let r = expand_person_periods(&[ev(EventTime::Event { period: 2 })], &CovariateMap::none());
        let got: Vec<_> = r.iter().map(|r| (r.period, r.event)).collect();
        assert_eq!(got, [(1, false), (2, true)]);

        let r = expand_person_periods(&[ev(EventTime::Censored { period: 4 })], &CovariateMap::none());
        let got: Vec<_> = r.iter().map(|r| (r.period, r.event)).collect();
        assert_eq!(got, [(1, false), (2, false), (3, false), (4, false)]);

        let events: Vec<_> = (0..10)
            .map(|i| MortalityEvent {
                branch: key(i),
                horizon: 5,
                time: if i < 3 {
                    EventTime::Event { period: 1 }
                } else {
                    EventTime::Censored { period: 4 }
                },
            })
            .collect();
        let r = expand_person_periods(&events, &CovariateMap::none());
        let p1: Vec<_> = r.iter().filter(|r| r.period == 1).collect();
        assert_eq!(p1.len(), 10);
        assert_eq!(p1.iter().filter(|r| r.event).count(), 3);
    }

    #[test]
    fn editor_indicator_coding() {
        let m = CovariateMap::editor_indicators(&["a".into(), "b".into(), "c".into()]);
        assert_eq!(m.names, ["editor=b", "editor=c"]);
        assert_eq!(m.vector_for("a"), [0.0, 0.0]);
        assert_eq!(m.vector_for("c"), [0.0, 1.0]);
        assert_eq!(m.vector_for("zzz"), [0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn expansion_conserves_events_and_records(
            branches in prop::collection::vec((prop::collection::vec(0u8..=100, 2..7), any::<bool>()), 1..40)
        ) {
            let mut events = Vec::new();
            for (i, (scores, strict)) in branches.iter().enumerate() {
                let scores: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
                let time = first_failure(&scores, ImprovementRule::from_strict(*strict)).unwrap();
                prop_assert!(time.last_period() < scores.len() as u32);
                events.push(MortalityEvent { branch: key(i), horizon: scores.len() as u32, time });
            }
            let records = expand_person_periods(&events, &CovariateMap::none());
            let uncensored = events.iter().filter(|e| e.time.is_event()).count();
            prop_assert_eq!(records.iter().filter(|r| r.event).count(), uncensored);
            let expected: u32 = events.iter().map(|e| e.time.last_period().min(e.horizon - 1)).sum();
            prop_assert_eq!(records.len() as u32, expected);
            for e in &events {
                let mine: Vec<_> = records.iter().filter(|r| r.branch == e.branch).collect();
                for (t, r) in mine.iter().enumerate() {
                    prop_assert_eq!(r.period, t as u32 + 1);
                    prop_assert_eq!(r.event, e.time.is_event() && t + 1 == mine.len());
                }
            }
        }
    }
}
