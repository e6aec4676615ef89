use super::{AnalyticsError, ScoreRow};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopSummary {
    pub loop_index: u32,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 when n = 1.
    pub sd: f64,
}

impl LoopSummary {
    /// Integer-rounded `mean ± sd`, the layout of the per-loop score table.
    pub fn cell(&self) -> String {
        format!("{} ± {}", self.mean.round() as i64, self.sd.round() as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopStats {
    pub editor: String,
    pub loops: Vec<LoopSummary>,
}

impl LoopStats {
    pub fn means(&self) -> Vec<f64> {
        self.loops.iter().map(|l| l.mean).collect()
    }

    /// Cells for every loop, space-separated.
    pub fn table_row(&self) -> String {
        self.loops
            .iter()
            .map(LoopSummary::cell)
            .collect::<Vec<_>>()
            .join("  ")
    }
}

#[derive(Default)]
struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn sample_sd(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).sqrt()
        }
    }
}

/// Mean and sample standard deviation of scores per loop index for one Editor.
pub fn compute_loop_stats(rows: &[ScoreRow], editor: &str) -> Result<LoopStats, AnalyticsError> {
    let mut acc: BTreeMap<u32, Welford> = BTreeMap::new();
    for row in rows.iter().filter(|r| r.editor == editor) {
        acc.entry(row.loop_index).or_default().push(row.score);
    }
    if acc.is_empty() {
        return Err(AnalyticsError::EmptyInput(editor.to_string()));
    }
    let loops = acc
        .into_iter()
        .map(|(loop_index, w)| LoopSummary {
            loop_index,
            n: w.n,
            mean: w.mean,
            sd: w.sample_sd(),
        })
        .collect();
    Ok(LoopStats {
        editor: editor.to_string(),
        loops,
    })
}

/// Stats for every Editor present, in name order.
pub fn compute_all_stats(rows: &[ScoreRow]) -> Result<Vec<LoopStats>, AnalyticsError> {
    let editors: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.editor.as_str()).collect();
    if editors.is_empty() {
        return Err(AnalyticsError::EmptyInput("*".into()));
    }
    editors
        .into_iter()
        .map(|e| compute_loop_stats(rows, e))
        .collect()
}
