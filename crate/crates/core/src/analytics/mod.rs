//! Per-loop score statistics and discrete-time survival analysis of when
//! refinement stops paying off.

pub mod hazard;
pub mod mortality;
pub mod report;
pub mod stats;

pub use hazard::{
    fit_discrete_hazard, survival_curve, survival_from_hazards, FitError, FitOptions, HazardModel,
    Link, SeparationPolicy, SurvivalFit, WaldTest,
};
pub use mortality::{
    detect_mortality, expand_person_periods, first_failure, CovariateMap, EventTime,
    ImprovementRule, MortalityEvent, PersonPeriodRecord, TooShort,
};
pub use report::{emit_report, render_summary, sanitize_file_stem, write_curves, write_table};
pub use stats::{compute_all_stats, compute_loop_stats, LoopStats, LoopSummary};

use crate::domain::{BranchKey, TupleId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

/// Version of the JSON-lines results format (header line plus one line per iteration).
pub const RESULTS_SCHEMA_VERSION: u32 = 1;

/// One scored iteration. Extra fields in the results file are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub tuple_id: TupleId,
    pub editor: String,
    pub loop_index: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalyticsError {
    #[error("no results for editor `{0}`")]
    EmptyInput(String),
    #[error("io: {0}")]
    Io(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("results schema_version {found}, expected {expected}")]
    SchemaVersion { found: u64, expected: u32 },
    #[error("missing results header line")]
    MissingHeader,
    #[error("branch {branch}: loop indices {found:?} are not 1..=n")]
    NonContiguous { branch: String, found: Vec<u32> },
    #[error("hazard fit: {0}")]
    Fit(#[from] FitError),
}

impl From<std::io::Error> for AnalyticsError {
    fn from(e: std::io::Error) -> Self {
        AnalyticsError::Io(e.to_string())
    }
}

pub fn load_results(path: &Path) -> Result<Vec<ScoreRow>, AnalyticsError> {
    let file = std::fs::File::open(path)
        .map_err(|e| AnalyticsError::Io(format!("{}: {e}", path.display())))?;
    parse_results(std::io::BufReader::new(file))
}

/// Reads a results stream: a `schema_version` header line, then score rows.
pub fn parse_results(reader: impl BufRead) -> Result<Vec<ScoreRow>, AnalyticsError> {
    let mut rows = Vec::new();
    let mut header_seen = false;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| AnalyticsError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        if !header_seen {
            let found = value
                .get("schema_version")
                .and_then(|v| v.as_u64())
                .ok_or(AnalyticsError::MissingHeader)?;
            if found != RESULTS_SCHEMA_VERSION as u64 {
                return Err(AnalyticsError::SchemaVersion {
                    found,
                    expected: RESULTS_SCHEMA_VERSION,
                });
            }
            header_seen = true;
            continue;
        }
        let row: ScoreRow = serde_json::from_value(value).map_err(|e| AnalyticsError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    if !header_seen {
        return Err(AnalyticsError::MissingHeader);
    }
    Ok(rows)
}

/// Score sequences keyed by branch, ordered by loop index.
pub fn group_branches(rows: &[ScoreRow]) -> Result<BTreeMap<BranchKey, Vec<f64>>, AnalyticsError> {
    let mut grouped: BTreeMap<BranchKey, Vec<(u32, f64)>> = BTreeMap::new();
    for r in rows {
        grouped
            .entry(BranchKey {
                tuple_id: r.tuple_id.clone(),
                editor: r.editor.clone(),
            })
            .or_default()
            .push((r.loop_index, r.score));
    }
    grouped
        .into_iter()
        .map(|(key, mut v)| {
            v.sort_by_key(|(k, _)| *k);
            let contiguous = v.iter().enumerate().all(|(i, (k, _))| *k == i as u32 + 1);
            if !contiguous {
                return Err(AnalyticsError::NonContiguous {
                    branch: key.to_string(),
                    found: v.iter().map(|(k, _)| *k).collect(),
                });
            }
            Ok((key, v.into_iter().map(|(_, s)| s).collect()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub link: Link,
    pub rule: ImprovementRule,
    pub separation: SeparationPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub period: u32,
    pub hazard: f64,
    pub survival: f64,
    /// `1 - S(t)`: chance the branch has reached its best score by transition t.
    pub reach_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditorCurve {
    pub editor: String,
    pub covariates: Vec<f64>,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub options: AnalysisOptions,
    pub stats: Vec<LoopStats>,
    pub events: Vec<MortalityEvent>,
    /// Branches with a single loop, which carry no transition.
    pub skipped_short: usize,
    pub fit: Option<SurvivalFit>,
    pub fit_error: Option<String>,
    pub curves: Vec<EditorCurve>,
}

impl AnalysisReport {
    pub fn event_count(&self) -> usize {
        self.events.iter().filter(|e| e.time.is_event()).count()
    }
}

/// Full pipeline: per-loop stats, mortality events, pooled hazard model with
/// editor indicators, and a survival curve per editor.
///
/// A failed hazard fit does not fail the analysis; it is reported in `fit_error`.
pub fn analyze(rows: &[ScoreRow], options: AnalysisOptions) -> Result<AnalysisReport, AnalyticsError> {
    let stats = compute_all_stats(rows)?;
    let branches = group_branches(rows)?;
    let mut events = Vec::new();
    let mut skipped_short = 0;
    for (key, scores) in &branches {
        match first_failure(scores, options.rule) {
            Ok(time) => events.push(MortalityEvent {
                branch: key.clone(),
                horizon: scores.len() as u32,
                time,
            }),
            Err(TooShort(_)) => skipped_short += 1,
        }
    }

    let mut editors: Vec<String> = events.iter().map(|e| e.branch.editor.clone()).collect();
    editors.sort();
    editors.dedup();
    let covariates = CovariateMap::editor_indicators(&editors);
    let records = expand_person_periods(&events, &covariates);
    let fit_options = FitOptions {
        link: options.link,
        separation: options.separation,
        ..FitOptions::default()
    };
    let (fit, fit_error) = if records.is_empty() {
        (None, Some("no loop transitions to analyse".to_string()))
    } else {
        match fit_discrete_hazard(&records, &covariates.names, &fit_options) {
            Ok(fit) => (Some(fit), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };

    let curves = match &fit {
        Some(fit) => editors
            .iter()
            .map(|editor| {
                let x = covariates.vector_for(editor);
                let points = fit
                    .hazards(&x)
                    .into_iter()
                    .zip(survival_from_hazards(&fit.hazards(&x)))
                    .enumerate()
                    .map(|(i, (hazard, survival))| CurvePoint {
                        period: i as u32 + 1,
                        hazard,
                        survival,
                        reach_max: 1.0 - survival,
                    })
                    .collect();
                EditorCurve {
                    editor: editor.clone(),
                    covariates: x,
                    points,
                }
            })
            .collect(),
        None => Vec::new(),
    };

    Ok(AnalysisReport {
        options,
        stats,
        events,
        skipped_short,
        fit,
        fit_error,
        curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: &str, e: &str, k: u32, s: f64) -> ScoreRow {
        ScoreRow {
            tuple_id: TupleId(t.into()),
            editor: e.into(),
            loop_index: k,
            score: s,
        }
    }

    #[test]
    fn parses_header_and_rows() {
        let text = "{\"schema_version\":1}\n{\"tuple_id\":\"t-1\",\"editor\":\"e\",\"loop_index\":1,\"score\":74.5,\"story_hash\":\"ab\"}\n\n";
        let rows = parse_results(text.as_bytes()).unwrap();
        assert_eq!(rows, [row("t-1", "e", 1, 74.5)]);
    }

    #[test]
    fn header_is_required_and_versioned() {
        assert_eq!(parse_results("".as_bytes()), Err(AnalyticsError::MissingHeader));
        assert_eq!(
            parse_results("{\"schema_version\":9}\n".as_bytes()),
            Err(AnalyticsError::SchemaVersion { found: 9, expected: 1 })
        );
        assert!(matches!(
            parse_results("{\"schema_version\":1}\nnot json\n".as_bytes()),
            Err(AnalyticsError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn branches_must_be_contiguous() {
        let rows = vec![row("a", "e", 1, 1.0), row("a", "e", 3, 2.0)];
        assert!(matches!(group_branches(&rows), Err(AnalyticsError::NonContiguous { .. })));
        let rows = vec![row("a", "e", 2, 2.0), row("a", "e", 1, 1.0)];
        assert_eq!(group_branches(&rows).unwrap().values().next().unwrap(), &vec![1.0, 2.0]);
    }

    #[test]
    fn analyze_two_editors() {
        let mut rows = Vec::new();
        for i in 0..12 {
            let t = format!("t{i}");
            // editor a fails early on odd tuples, b improves longer
            let a = if i % 2 == 0 { [60.0, 70.0, 65.0] } else { [60.0, 55.0, 70.0] };
            let b = if i % 3 == 0 { [60.0, 70.0, 70.0] } else { [60.0, 70.0, 80.0] };
            for k in 0..3 {
                rows.push(row(&t, "a", k as u32 + 1, a[k]));
                rows.push(row(&t, "b", k as u32 + 1, b[k]));
            }
        }
        let report = analyze(&rows, AnalysisOptions::default()).unwrap();
        assert_eq!(report.stats.len(), 2);
        assert_eq!(report.events.len(), 24);
        let fit = report.fit.as_ref().expect("fit");
        assert_eq!(fit.covariate_names, ["editor=b"]);
        assert_eq!(report.curves.len(), 2);
        for c in &report.curves {
            assert_eq!(c.points.len(), 2);
            assert!(c.points[1].survival <= c.points[0].survival);
        }
    }

    #[test]
    fn single_loop_branches_are_skipped() {
        let rows = vec![row("a", "e", 1, 50.0)];
        let report = analyze(&rows, AnalysisOptions::default()).unwrap();
        assert_eq!(report.skipped_short, 1);
        assert!(report.fit.is_none() && report.fit_error.is_some());
    }
}
