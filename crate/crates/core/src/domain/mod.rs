//! Story elements, tile tuples, stories, critiques and refinement traces.

mod catalog;

pub use catalog::{enumerate_tuples, CatalogError, TileCatalog, CATALOG_SCHEMA_VERSION};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use sha2::{Digest, Sha256};
use std::fmt;

/// The six narrative elements a story is built around, in selection order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Protagonist,
    Location,
    Mood,
    ImportantObject,
    Activity,
    SpecialAppearance,
}

impl ElementKind {
    pub const ALL: [ElementKind; 6] = [
        ElementKind::Protagonist,
        ElementKind::Location,
        ElementKind::Mood,
        ElementKind::ImportantObject,
        ElementKind::Activity,
        ElementKind::SpecialAppearance,
    ];

    /// Elements chosen by the players. The special appearance is left to the AI.
    pub const PLAYER_SELECTED: [ElementKind; 5] = [
        ElementKind::Protagonist,
        ElementKind::Location,
        ElementKind::Mood,
        ElementKind::ImportantObject,
        ElementKind::Activity,
    ];

    pub fn key(self) -> &'static str {
        match self {
            ElementKind::Protagonist => "protagonist",
            ElementKind::Location => "location",
            ElementKind::Mood => "mood",
            ElementKind::ImportantObject => "important_object",
            ElementKind::Activity => "activity",
            ElementKind::SpecialAppearance => "special_appearance",
        }
    }

    /// Title-cased name used in prompts.
    pub fn display_name(self) -> &'static str {
        match self {
            ElementKind::Protagonist => "Protagonist",
            ElementKind::Location => "Location",
            ElementKind::Mood => "Mood",
            ElementKind::ImportantObject => "Important Object",
            ElementKind::Activity => "Activity",
            ElementKind::SpecialAppearance => "Special Appearance",
        }
    }

    pub fn from_key(key: &str) -> Option<ElementKind> {
        ElementKind::ALL.into_iter().find(|k| k.key() == key)
    }

    pub fn is_player_selected(self) -> bool {
        self != ElementKind::SpecialAppearance
    }
}

impl fmt::Display for ElementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Value of the special-appearance slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecialAppearance {
    /// A catalog label, used when tuples are drawn for simulation.
    Tile(String),
    /// The Writer invents the surprise element itself.
    AiChosen,
}

impl SpecialAppearance {
    pub fn label(&self) -> Option<&str> {
        match self {
            SpecialAppearance::Tile(l) => Some(l),
            SpecialAppearance::AiChosen => None,
        }
    }
}

/// One concrete choice for each of the six story elements.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileTuple {
    pub protagonist: String,
    pub location: String,
    pub mood: String,
    pub important_object: String,
    pub activity: String,
    pub special_appearance: SpecialAppearance,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TupleError {
    #[error("element `{0}` is empty")]
    EmptyElement(ElementKind),
    #[error("label `{label}` is not in the catalog for `{kind}`")]
    NotInCatalog { kind: ElementKind, label: String },
    #[error("unknown element kind `{0}`")]
    UnknownKind(String),
    #[error("malformed tuple spec: {0}")]
    Malformed(String),
}

impl TileTuple {
    /// The label for a player-selected element, or the special-appearance tile if set.
    pub fn get(&self, kind: ElementKind) -> Option<&str> {
        match kind {
            ElementKind::Protagonist => Some(&self.protagonist),
            ElementKind::Location => Some(&self.location),
            ElementKind::Mood => Some(&self.mood),
            ElementKind::ImportantObject => Some(&self.important_object),
            ElementKind::Activity => Some(&self.activity),
            ElementKind::SpecialAppearance => self.special_appearance.label(),
        }
    }

    pub fn validate(&self) -> Result<(), TupleError> {
        for kind in ElementKind::PLAYER_SELECTED {
            if self.get(kind).is_none_or(|l| l.trim().is_empty()) {
                return Err(TupleError::EmptyElement(kind));
            }
        }
        if let SpecialAppearance::Tile(l) = &self.special_appearance {
            if l.trim().is_empty() {
                return Err(TupleError::EmptyElement(ElementKind::SpecialAppearance));
            }
        }
        Ok(())
    }

    /// Checks every label against the catalog. An AI-chosen special appearance is always accepted.
    pub fn validate_against(&self, catalog: &TileCatalog) -> Result<(), TupleError> {
        self.validate()?;
        for kind in ElementKind::ALL {
            if let Some(label) = self.get(kind) {
                if !catalog.contains(kind, label) {
                    return Err(TupleError::NotInCatalog {
                        kind,
                        label: label.to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Builds a tuple from `kind -> label` pairs. A missing special appearance,
    /// or the value `ai_chosen`, leaves it to the Writer.
    pub fn from_pairs<'a, I>(pairs: I) -> Result<TileTuple, TupleError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut map: BTreeMap<ElementKind, String> = BTreeMap::new();
        for (k, v) in pairs {
            let kind = ElementKind::from_key(k.trim()).ok_or_else(|| TupleError::UnknownKind(k.trim().to_string()))?;
            if map.insert(kind, v.trim().to_string()).is_some() {
                return Err(TupleError::Malformed(format!("`{}` given twice", kind.key())));
            }
        }
        let mut take = |k| map.remove(&k).unwrap_or_default();
        let tuple = TileTuple {
            protagonist: take(ElementKind::Protagonist),
            location: take(ElementKind::Location),
            mood: take(ElementKind::Mood),
            important_object: take(ElementKind::ImportantObject),
            activity: take(ElementKind::Activity),
            special_appearance: match take(ElementKind::SpecialAppearance) {
                s if s.is_empty() || s == "ai_chosen" => SpecialAppearance::AiChosen,
                s => SpecialAppearance::Tile(s),
            },
        };
        tuple.validate()?;
        Ok(tuple)
    }

    /// Parses `protagonist=a cat; location=a kitchen in a private home; ...`.
    pub fn parse_inline(spec: &str) -> Result<TileTuple, TupleError> {
        let pairs = spec
            .split(';')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                p.split_once('=')
                    .ok_or_else(|| TupleError::Malformed(format!("`{}` is not kind=label", p.trim())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        TileTuple::from_pairs(pairs)
    }

    /// Stable content-derived identifier.
    pub fn id(&self) -> TupleId {
        let mut hasher = Sha256::new();
        for kind in ElementKind::ALL {
            hasher.update(kind.key().as_bytes());
            hasher.update([0x1f]);
            hasher.update(self.get(kind).unwrap_or("\u{0}ai_chosen").as_bytes());
            hasher.update([0x1e]);
        }
        let digest = hasher.finalize();
        TupleId(format!("t-{}", hex::encode(&digest[..6])))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TupleId(pub String);

impl fmt::Display for TupleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Identifies one Editor's branch for one tuple in an experiment.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BranchKey {
    pub tuple_id: TupleId,
    pub editor: String,
}

impl fmt::Display for BranchKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.tuple_id, self.editor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Story {
    pub text: String,
    pub writer_model: String,
    pub loop_index: u32,
    pub tuple_ref: TupleId,
}

impl Story {
    /// Hex SHA-256 of the story text; the key of the story side table.
    pub fn hash(&self) -> String {
        story_hash(&self.text)
    }
}

pub fn story_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Editor verdict on one story.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critique {
    /// Percentage in `[0, 100]`, kept exactly as emitted.
    pub score: f64,
    pub rationale: String,
    pub editor_model: String,
    pub raw_text: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTimings {
    pub writer_ms: u64,
    pub editor_ms: u64,
}

/// One Writer-Editor loop: the story, its critique and the prompts that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iteration {
    pub story: Story,
    pub critique: Critique,
    pub writer_prompt: String,
    pub editor_prompt: String,
    /// Extra Editor calls needed before the score parsed.
    #[serde(default)]
    pub parse_retries: u32,
    #[serde(default)]
    pub timings: IterationTimings,
}

impl Iteration {
    pub fn loop_index(&self) -> u32 {
        self.story.loop_index
    }
    pub fn score(&self) -> f64 {
        self.critique.score
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum TraceStatus {
    Completed,
    Aborted { reason: String },
}

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub schema_version: u32,
    pub tuple_ref: TupleId,
    pub tuple: TileTuple,
    pub writer_model: String,
    pub editor_model: String,
    pub iterations: Vec<Iteration>,
    /// 1-based loop index of the selected story; 0 when there are no iterations.
    pub final_choice: u32,
    pub status: TraceStatus,
}

impl RefinementTrace {
    pub fn new(tuple: TileTuple, writer_model: &str, editor_model: &str) -> Self {
        RefinementTrace {
            schema_version: TRACE_SCHEMA_VERSION,
            tuple_ref: tuple.id(),
            tuple,
            writer_model: writer_model.to_string(),
            editor_model: editor_model.to_string(),
            iterations: Vec::new(),
            final_choice: 0,
            status: TraceStatus::Completed,
        }
    }

    pub fn key(&self) -> BranchKey {
        BranchKey {
            tuple_id: self.tuple_ref.clone(),
            editor: self.editor_model.clone(),
        }
    }

    pub fn scores(&self) -> Vec<f64> {
        self.iterations.iter().map(Iteration::score).collect()
    }

    /// Appends an iteration and refreshes `final_choice`.
    pub fn push(&mut self, iteration: Iteration) {
        debug_assert_eq!(iteration.loop_index() as usize, self.iterations.len() + 1);
        self.iterations.push(iteration);
        self.final_choice = best_iteration(&self.scores()).map_or(0, |i| i as u32 + 1);
    }

    pub fn is_completed(&self) -> bool {
        matches!(self.status, TraceStatus::Completed)
    }

    /// Copy with all wall-clock measurements zeroed, for content comparisons.
    pub fn without_timings(&self) -> RefinementTrace {
        let mut t = self.clone();
        for it in &mut t.iterations {
            it.timings = IterationTimings::default();
        }
        t
    }
}

/// Index of the first maximum. `None` for an empty slice.
pub fn best_iteration(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if scores[b] >= s => {}
            _ => best = Some(i),
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inline_tuple_specs() {
        let t = TileTuple::parse_inline(
            "protagonist=a cat; location=a kitchen in a private home; mood=happiness; important_object=a black dress; activity=cooking",
        )
        .unwrap();
        assert_eq!(t.protagonist, "a cat");
        assert_eq!(t.special_appearance, SpecialAppearance::AiChosen);
        let t = TileTuple::parse_inline(
            "protagonist=a;location=b;mood=c;important_object=d;activity=e;special_appearance=Santa Claus;",
        )
        .unwrap();
        assert_eq!(t.special_appearance, SpecialAppearance::Tile("Santa Claus".into()));
        assert_eq!(
            TileTuple::parse_inline("protagonist=a;location=b"),
            Err(TupleError::EmptyElement(ElementKind::Mood))
        );
        assert!(matches!(TileTuple::parse_inline("hero=a"), Err(TupleError::UnknownKind(_))));
        assert!(matches!(TileTuple::parse_inline("protagonist"), Err(TupleError::Malformed(_))));
        assert!(matches!(
            TileTuple::parse_inline("protagonist=a;protagonist=b"),
            Err(TupleError::Malformed(_))
        ));
    }

    pub(crate) fn sample_tuple() -> TileTuple {
        TileTuple {
            protagonist: "a cat".into(),
            location: "a kitchen".into(),
            mood: "happiness".into(),
            important_object: "a black dress".into(),
            activity: "cooking".into(),
            special_appearance: SpecialAppearance::AiChosen,
        }
    }

    #[test]
    fn best_iteration_prefers_earliest_max() {
        assert_eq!(best_iteration(&[]), None);
        assert_eq!(best_iteration(&[74.0]), Some(0));
        assert_eq!(best_iteration(&[70.0, 90.0, 90.0]), Some(1));
        assert_eq!(best_iteration(&[91.0, 86.0]), Some(0));
        assert_eq!(best_iteration(&[100.0, 90.0]), Some(0));
    }

    #[test]
    fn tuple_validation() {
        let mut t = sample_tuple();
        assert!(t.validate().is_ok());
        t.protagonist = "  ".into();
        assert_eq!(
            t.validate(),
            Err(TupleError::EmptyElement(ElementKind::Protagonist))
        );
        let mut t = sample_tuple();
        t.special_appearance = SpecialAppearance::Tile(String::new());
        assert!(t.validate().is_err());
    }

    #[test]
    fn tuple_id_is_stable_and_content_sensitive() {
        let a = sample_tuple();
        let mut b = sample_tuple();
        assert_eq!(a.id(), b.id());
        b.special_appearance = SpecialAppearance::Tile("Santa Claus".into());
        assert_ne!(a.id(), b.id());
    }

    #[test]
    fn element_keys_round_trip() {
        for k in ElementKind::ALL {
            assert_eq!(ElementKind::from_key(k.key()), Some(k));
        }
        assert_eq!(ElementKind::from_key("villain"), None);
    }
}
