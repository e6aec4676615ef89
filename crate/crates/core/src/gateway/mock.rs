//! A deterministic stand-in model for demos and smoke tests.
//!
//! It recognises Editor prompts by the score-format line they end with. A
//! first critique scores in the sixties; a later one takes the last score
//! quoted in the prompt and usually raises it by a few points, occasionally
//! holding or dropping it. Anything else is treated as a Writer prompt and
//! answered with a short placeholder story. Responses depend only on the
//! model name and prompt text.

use super::ModelHandle;
use crate::prompts::SCORE_FORMAT_LINE;
use regex::Regex;
use sha2::{Digest, Sha256};
use std::sync::LazyLock;

static QUOTED_SCORE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"Overall Score:[ \t]*(\d+(?:\.\d+)?)[ \t]*%").expect("valid regex"));

fn prompt_hash(name: &str, prompt: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(name.as_bytes())
        .chain_update([0])
        .chain_update(prompt.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("eight bytes"))
}

fn last_quoted_score(prompt: &str) -> Option<f64> {
    QUOTED_SCORE
        .captures_iter(prompt)
        .last()
        .and_then(|c| c[1].parse().ok())
}

pub fn mock_response(name: &str, prompt: &str) -> String {
    let h = prompt_hash(name, prompt);
    if prompt.contains(SCORE_FORMAT_LINE) {
        let score = match last_quoted_score(prompt) {
            None => 60 + prompt_hash(name, "") % 8 + h % 5,
            Some(prev) => {
                // mostly +2..+9, sometimes a tie or a small drop
                let delta: i64 = match h % 10 {
                    0 => -3,
                    1 => 0,
                    r => r as i64,
                };
                (prev.round() as i64 + delta).clamp(0, 100) as u64
            }
        };
        format!(
            "The story uses most of the requested elements. The ending could be warmer and the important object deserves a bigger role.\nOverall Score: {score}%"
        )
    } else {
        let draft = QUOTED_SCORE.find_iter(prompt).count() + 1;
        format!(
            "Once upon a time there was a small adventure (draft {draft}, tale {:08x}). Everyone learned something kind, and the day ended happily.",
            h as u32
        )
    }
}

/// A scripted handle answering with [`mock_response`].
pub fn mock_model(name: &str) -> ModelHandle {
    let owned = name.to_string();
    ModelHandle::from_fn(name, move |p| mock_response(&owned, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn editor_scores_follow_the_previous_critique() {
        let score = |s: &str| s.rsplit("Overall Score: ").next().unwrap().trim_end_matches('%').parse::<i64>().unwrap();
        let first = score(&mock_response("e", "rate it\nOverall Score: <N>%"));
        assert!((60..72).contains(&first));
        for k in 0..50 {
            let prompt = format!("rate it {k}\nOverall Score: <N>%\nprevious critique: Overall Score: 70%");
            let next = score(&mock_response("e", &prompt));
            assert!((67..=79).contains(&next));
        }
        assert_eq!(
            mock_response("e", "rate\nOverall Score: <N>%"),
            mock_response("e", "rate\nOverall Score: <N>%")
        );
        assert!(mock_response("w", "write a story").starts_with("Once upon a time"));
    }
}
