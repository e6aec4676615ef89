use regex::Regex;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::sync::LazyLock;

static ANCHOR: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)overall[ \t]+score[ \t]*\**[ \t]*:[ \t]*\**[ \t]*(-?\d+(?:\.\d+)?)[ \t]*%")
        .expect("anchor regex")
});
static PERCENT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(\d+(?:\.\d+)?)[ \t]*%").expect("percent regex"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreRule {
    /// An `Overall Score: <N>%` line; the last one wins.
    LabeledAnchor,
    /// No anchor, but exactly one percentage anywhere in the text.
    SolePercent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreParse {
    pub value: f64,
    /// Byte range of the number inside the raw text.
    pub source_span: Range<usize>,
    pub rule: ScoreRule,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoreError {
    #[error("editor output is empty")]
    EmptyInput,
    #[error("no score found in editor output")]
    NoScoreFound,
    #[error("editor output has {0} percentages and no overall-score line")]
    AmbiguousScore(usize),
    #[error("score {0} is outside [0, 100]")]
    OutOfRange(f64),
}

/// Pulls the overall percentage out of an Editor response.
pub fn extract_score(raw: &str) -> Result<ScoreParse, ScoreError> {
    if raw.trim().is_empty() {
        return Err(ScoreError::EmptyInput);
    }
    let (m, rule) = if let Some(c) = ANCHOR.captures_iter(raw).last() {
        (c.get(1).expect("group 1"), ScoreRule::LabeledAnchor)
    } else {
        let all: Vec<_> = PERCENT.captures_iter(raw).collect();
        match all.len() {
            0 => return Err(ScoreError::NoScoreFound),
            1 => (all[0].get(1).expect("group 1"), ScoreRule::SolePercent),
            n => return Err(ScoreError::AmbiguousScore(n)),
        }
    };
    let value: f64 = m.as_str().parse().map_err(|_| ScoreError::NoScoreFound)?;
    if !(0.0..=100.0).contains(&value) {
        return Err(ScoreError::OutOfRange(value));
    }
    Ok(ScoreParse {
        value,
        source_span: m.range(),
        rule,
    })
}

/// The critique text with the overall-score line removed. Falls back to the full text.
pub fn rationale_of(raw: &str, parse: &ScoreParse) -> String {
    let text = if parse.rule == ScoreRule::LabeledAnchor {
        let line_start = raw[..parse.source_span.start].rfind('\n').map_or(0, |i| i + 1);
        let line_end = raw[parse.source_span.end..]
            .find('\n')
            .map_or(raw.len(), |i| parse.source_span.end + i);
        let before = &raw[..line_start];
        let after = &raw[line_end..];
        // keep text preceding the anchor on the same line
        let lead = raw[line_start..parse.source_span.start]
            .to_ascii_lowercase()
            .rfind("overall")
            .map(|i| raw[line_start..line_start + i].trim_end_matches(['*', ' ', '\t']))
            .unwrap_or("");
        format!("{}{}{}", before, lead, after)
    } else {
        raw.to_string()
    };
    let text = text.trim();
    if text.is_empty() {
        raw.trim().to_string()
    } else {
        text.to_string()
    }
}
