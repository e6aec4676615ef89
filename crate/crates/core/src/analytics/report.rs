use super::{AnalysisReport, AnalyticsError, EditorCurve, LoopStats};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// File-name-safe form of an editor name, e.g. `gemma2:2b` -> `gemma2_2b`.
pub fn sanitize_file_stem(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect();
    if s.is_empty() || s.chars().all(|c| c == '.') {
        "editor".into()
    } else {
        s
    }
}

fn csv_err(e: csv::Error) -> AnalyticsError {
    AnalyticsError::Io(e.to_string())
}

/// One row per (editor, loop): `editor,loop_index,n,mean,sd,cell`.
pub fn write_table(stats: &[LoopStats], path: &Path) -> Result<(), AnalyticsError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["editor", "loop_index", "n", "mean", "sd", "cell"])
        .map_err(csv_err)?;
    for s in stats {
        for l in &s.loops {
            w.write_record([
                s.editor.clone(),
                l.loop_index.to_string(),
                l.n.to_string(),
                format!("{:.4}", l.mean),
                format!("{:.4}", l.sd),
                l.cell(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `<dir>/<editor>.csv` with `period,hazard,survival,reach_max`; returns the paths written.
pub fn write_curves(curves: &[EditorCurve], dir: &Path) -> Result<Vec<PathBuf>, AnalyticsError> {
    std::fs::create_dir_all(dir)?;
    let mut used = BTreeSet::new();
    let mut paths = Vec::new();
    for c in curves {
        let stem = sanitize_file_stem(&c.editor);
        let mut name = stem.clone();
        let mut n = 2;
        while !used.insert(name.clone()) {
            name = format!("{stem}-{n}");
            n += 1;
        }
        let path = dir.join(format!("{name}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(["period", "hazard", "survival", "reach_max"])
            .map_err(csv_err)?;
        for p in &c.points {
            w.write_record([
                p.period.to_string(),
                format!("{:.4}", p.hazard),
                format!("{:.4}", p.survival),
                format!("{:.4}", p.reach_max),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

fn fmt_p(p: f64) -> String {
    if p < 1e-4 {
        format!("{p:.2e}")
    } else {
        format!("{p:.4}")
    }
}

pub fn render_summary(report: &AnalysisReport) -> String {
    let mut out = String::new();
    let rule = match report.options.rule {
        super::ImprovementRule::Strict => "strict improvement (a tie ends the branch)",
        super::ImprovementRule::AllowTies => "non-decreasing (only a decline ends the branch)",
    };
    let events = report.event_count();
    let _ = writeln!(out, "Score by loop (mean ± sd)");
    let width = report.stats.iter().map(|s| s.editor.len()).max().unwrap_or(0);
    for s in &report.stats {
        let _ = writeln!(out, "{:<width$}  {}", s.editor, s.table_row());
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "Survival of improvement");
    let _ = writeln!(out, "link: {}", report.options.link);
    let _ = writeln!(out, "survival rule: {rule}");
    let _ = writeln!(
        out,
        "branches: {} ({} events, {} censored, {} too short to analyse)",
        report.events.len(),
        events,
        report.events.len() - events,
        report.skipped_short
    );
    match (&report.fit, &report.fit_error) {
        (Some(fit), _) => {
            let _ = writeln!(
                out,
                "person-periods: {}  log-likelihood: {:.4}{}  iterations: {}",
                fit.n_records,
                fit.log_likelihood,
                if fit.penalized { " (penalised)" } else { "" },
                fit.iterations
            );
            for (t, a) in fit.period_effects.iter().enumerate() {
                let _ = writeln!(out, "alpha[{}] = {:.4}", t + 1, a);
            }
            match (fit.lr_statistic, fit.p_value) {
                (Some(lr), Some(p)) => {
                    let _ = writeln!(
                        out,
                        "editor effect LRT: chi2 = {:.4}, df = {}, p = {}",
                        lr,
                        fit.df,
                        fmt_p(p)
                    );
                }
                _ => {
                    let _ = writeln!(out, "editor effect LRT: n/a (single editor)");
                }
            }
            for w in &fit.wald {
                let _ = writeln!(
                    out,
                    "  {}: beta = {:.4}, se = {:.4}, z = {:.4}, p = {}",
                    w.name,
                    w.estimate,
                    w.std_error,
                    w.z,
                    fmt_p(w.p_value)
                );
            }
            if fit.separation.is_empty() {
                let _ = writeln!(out, "separation: none");
            } else {
                let _ = writeln!(
                    out,
                    "separation (Firth-penalised fit): {}",
                    fit.separation.join("; ")
                );
            }
        }
        (None, Some(e)) => {
            let _ = writeln!(out, "hazard fit unavailable: {e}");
        }
        (None, None) => {}
    }
    if !report.curves.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "Probability of having reached the best score, 1 - S(t)");
        for c in &report.curves {
            let cells: Vec<String> = c
                .points
                .iter()
                .map(|p| format!("t{}={:.4}", p.period, p.reach_max))
                .collect();
            let _ = writeln!(out, "{:<width$}  {}", c.editor, cells.join("  "));
        }
    }
    out
}

/// Writes the table CSV, one curve CSV per editor, and the text summary.
pub fn emit_report(
    report: &AnalysisReport,
    table: &Path,
    survival_dir: &Path,
    summary: &Path,
) -> Result<Vec<PathBuf>, AnalyticsError> {
    for p in [table, summary] {
        if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_table(&report.stats, table)?;
    let curves = write_curves(&report.curves, survival_dir)?;
    std::fs::write(summary, render_summary(report))?;
    Ok(curves)
}
