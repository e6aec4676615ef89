//! The loop prompt templates and the tile-selection guidance prompt.
//!
//! Templates are plain text files, one per [`TemplateId`], with `{name}`
//! placeholders. Each id has a fixed placeholder set; a template that omits
//! one of them or uses an unknown name is rejected at load time. Built-in
//! defaults are compiled in from `templates/`.

mod template;

pub use template::{SyntaxError, Template};

use crate::domain::{Critique, ElementKind, SpecialAppearance, Story, TileTuple};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

/// Line the Editor is asked to end with. The score parser keys on it.
pub const SCORE_FORMAT_LINE: &str = "Overall Score: <N>%";

/// Appended to an Editor prompt when its previous answer carried no parseable score.
pub const FORMAT_REMINDER: &str = "\n\nIMPORTANT: your answer must end with exactly one line of the form \"Overall Score: <N>%\", where N is a number from 0 to 100.";

/// Writer instruction bound to `{special_appearance}` when the players leave it to the AI.
pub const AI_CHOSEN_WRITER_TEXT: &str = "not chosen by the players. Invent a surprising special appearance yourself, such as an unexpected character or event, and weave it into the story";

/// Editor-side description of the same case.
pub const AI_CHOSEN_EDITOR_TEXT: &str = "left to the writer, who was asked to invent a surprising character or event";

/// Idle time after which guidance switches from encouragement to concrete cues.
pub const DEFAULT_IDLE_THRESHOLD: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateId {
    WriterFirst,
    EditorFirst,
    WriterSubsequent,
    EditorSubsequent,
    GuidanceHint,
}

impl TemplateId {
    pub const ALL: [TemplateId; 5] = [
        TemplateId::WriterFirst,
        TemplateId::EditorFirst,
        TemplateId::WriterSubsequent,
        TemplateId::EditorSubsequent,
        TemplateId::GuidanceHint,
    ];

    pub fn key(self) -> &'static str {
        match self {
            TemplateId::WriterFirst => "writer_first",
            TemplateId::EditorFirst => "editor_first",
            TemplateId::WriterSubsequent => "writer_subsequent",
            TemplateId::EditorSubsequent => "editor_subsequent",
            TemplateId::GuidanceHint => "guidance_hint",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.txt", self.key())
    }

    pub fn required_placeholders(self) -> BTreeSet<&'static str> {
        const ELEMENTS: [&str; 6] = [
            "protagonist",
            "location",
            "mood",
            "important_object",
            "activity",
            "special_appearance",
        ];
        let names: Vec<&'static str> = match self {
            TemplateId::WriterFirst => ELEMENTS.to_vec(),
            TemplateId::EditorFirst => ELEMENTS.iter().copied().chain(["story"]).collect(),
            TemplateId::WriterSubsequent => {
                vec!["writer_first_prompt", "previous_story", "critique"]
            }
            TemplateId::EditorSubsequent => {
                vec!["editor_first_prompt", "previous_story", "previous_critique"]
            }
            TemplateId::GuidanceHint => vec!["stage", "stage_description", "hint_style"],
        };
        names.into_iter().collect()
    }

    fn builtin_body(self) -> &'static str {
        match self {
            TemplateId::WriterFirst => include_str!("../../templates/writer_first.txt"),
            TemplateId::EditorFirst => include_str!("../../templates/editor_first.txt"),
            TemplateId::WriterSubsequent => include_str!("../../templates/writer_subsequent.txt"),
            TemplateId::EditorSubsequent => include_str!("../../templates/editor_subsequent.txt"),
            TemplateId::GuidanceHint => include_str!("../../templates/guidance_hint.txt"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template `{id}`: {source}")]
    Syntax {
        id: &'static str,
        #[source]
        source: SyntaxError,
    },
    #[error("template `{id}` is missing placeholder `{{{name}}}`")]
    MissingPlaceholder { id: &'static str, name: String },
    #[error("template `{id}` uses unknown placeholder `{{{name}}}`")]
    UnknownPlaceholder { id: &'static str, name: String },
    #[error("template `{id}`: value for `{name}` is empty")]
    EmptyValue { id: &'static str, name: String },
    #[error("template `{id}`: placeholder `{name}` left unresolved")]
    Unresolved { id: &'static str, name: String },
    #[error("cannot read template file {path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// A validated template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: String,
    template: Template,
}

impl PromptTemplate {
    pub fn new(id: TemplateId, body: &str) -> Result<PromptTemplate, TemplateError> {
        let template =
            Template::parse(body).map_err(|source| TemplateError::Syntax { id: id.key(), source })?;
        let used = template.placeholders();
        let required = id.required_placeholders();
        if let Some(missing) = required.iter().find(|n| !used.contains(*n)) {
            return Err(TemplateError::MissingPlaceholder {
                id: id.key(),
                name: missing.to_string(),
            });
        }
        if let Some(unknown) = used.iter().find(|n| !required.contains(*n)) {
            return Err(TemplateError::UnknownPlaceholder {
                id: id.key(),
                name: unknown.to_string(),
            });
        }
        Ok(PromptTemplate {
            id,
            body: body.to_string(),
            template,
        })
    }

    pub fn render(&self, binding: &BTreeMap<&str, &str>) -> Result<String, TemplateError> {
        if let Some((name, _)) = binding.iter().find(|(_, v)| v.trim().is_empty()) {
            return Err(TemplateError::EmptyValue {
                id: self.id.key(),
                name: name.to_string(),
            });
        }
        self.template
            .render(binding)
            .map_err(|name| TemplateError::Unresolved { id: self.id.key(), name })
    }
}

/// What the guidance agent knows about the table when asked for a hint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GuidanceContext {
    pub stage: ElementKind,
    pub idle: Duration,
    pub idle_threshold: Duration,
}

impl GuidanceContext {
    pub fn new(stage: ElementKind, idle: Duration) -> GuidanceContext {
        GuidanceContext {
            stage,
            idle,
            idle_threshold: DEFAULT_IDLE_THRESHOLD,
        }
    }

    pub fn escalated(&self) -> bool {
        self.idle > self.idle_threshold
    }
}

/// The full set of templates, immutable once loaded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptForge {
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl Default for PromptForge {
    fn default() -> Self {
        PromptForge::builtin()
    }
}

impl PromptForge {
    pub fn builtin() -> PromptForge {
        let templates = TemplateId::ALL
            .iter()
            .map(|&id| {
                let t = PromptTemplate::new(id, id.builtin_body()).expect("builtin template is valid");
                (id, t)
            })
            .collect();
        PromptForge { templates }
    }

    /// Loads `<id>.txt` for every template id from `dir`.
    pub fn load_dir(dir: &Path) -> Result<PromptForge, TemplateError> {
        let mut templates = BTreeMap::new();
        for id in TemplateId::ALL {
            let path = dir.join(id.file_name());
            let body = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                path: path.clone(),
                message: e.to_string(),
            })?;
            templates.insert(id, PromptTemplate::new(id, &body)?);
        }
        Ok(PromptForge { templates })
    }

    /// Writes the current templates to `dir`, one file each.
    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for t in self.templates.values() {
            std::fs::write(dir.join(t.id.file_name()), &t.body)?;
        }
        Ok(())
    }

    pub fn template(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    fn element_binding<'a>(
        tuple: &'a TileTuple,
        ai_chosen_text: &'static str,
    ) -> BTreeMap<&'static str, &'a str> {
        let mut b = BTreeMap::new();
        for kind in ElementKind::PLAYER_SELECTED {
            b.insert(kind.key(), tuple.get(kind).unwrap_or(""));
        }
        let special = match &tuple.special_appearance {
            SpecialAppearance::Tile(label) => label.as_str(),
            SpecialAppearance::AiChosen => ai_chosen_text,
        };
        b.insert(ElementKind::SpecialAppearance.key(), special);
        b
    }

    pub fn render_writer_first(&self, tuple: &TileTuple) -> Result<String, TemplateError> {
        self.template(TemplateId::WriterFirst)
            .render(&Self::element_binding(tuple, AI_CHOSEN_WRITER_TEXT))
    }

    pub fn render_editor_first(&self, tuple: &TileTuple, story: &Story) -> Result<String, TemplateError> {
        let mut b = Self::element_binding(tuple, AI_CHOSEN_EDITOR_TEXT);
        b.insert("story", story.text.trim());
        self.template(TemplateId::EditorFirst).render(&b)
    }

    /// First-loop Writer prompt, followed by the previous story and its critique.
    pub fn render_writer_subsequent(
        &self,
        tuple: &TileTuple,
        prev_story: &Story,
        critique: &Critique,
    ) -> Result<String, TemplateError> {
        let first = self.render_writer_first(tuple)?;
        let b = BTreeMap::from([
            ("writer_first_prompt", first.as_str()),
            ("previous_story", prev_story.text.trim()),
            ("critique", critique.raw_text.trim()),
        ]);
        self.template(TemplateId::WriterSubsequent).render(&b)
    }

    /// First-loop Editor prompt for `story`, followed by the previous story and critique.
    pub fn render_editor_subsequent(
        &self,
        tuple: &TileTuple,
        story: &Story,
        prev_story: &Story,
        prev_critique: &Critique,
    ) -> Result<String, TemplateError> {
        self.render_editor_with_history(tuple, story, &[(prev_story, prev_critique)])
    }

    /// Like [`render_editor_subsequent`](Self::render_editor_subsequent) with several prior
    /// iterations, oldest first. A single entry renders identically.
    pub fn render_editor_with_history(
        &self,
        tuple: &TileTuple,
        story: &Story,
        history: &[(&Story, &Critique)],
    ) -> Result<String, TemplateError> {
        let first = self.render_editor_first(tuple, story)?;
        let (stories, critiques) = match history {
            [(s, c)] => (s.text.trim().to_string(), c.raw_text.trim().to_string()),
            many => {
                let label = |i: usize| format!("[loop {}]", many[i].0.loop_index);
                let stories = (0..many.len())
                    .map(|i| format!("{}\n{}", label(i), many[i].0.text.trim()))
                    .collect::<Vec<_>>()
                    .join("\n\n");
                let critiques = (0..many.len())
                    .map(|i| format!("{}\n{}", label(i), many[i].1.raw_text.trim()))
                    .collect::<Vec<_>>()
                    .join("\n\n");
                (stories, critiques)
            }
        };
        let b = BTreeMap::from([
            ("editor_first_prompt", first.as_str()),
            ("previous_story", stories.as_str()),
            ("previous_critique", critiques.as_str()),
        ]);
        self.template(TemplateId::EditorSubsequent).render(&b)
    }

    pub fn render_guidance_hint(&self, ctx: &GuidanceContext) -> String {
        let style = if ctx.escalated() {
            cue_instruction(ctx.stage)
        } else {
            "Give an open-ended encouragement: invite them to look at all the tiles and pick the one they like the most, the one that looks the most fun or exciting."
        };
        let stage = ctx.stage.display_name().to_lowercase();
        let b = BTreeMap::from([
            ("stage", stage.as_str()),
            ("stage_description", stage_description(ctx.stage)),
            ("hint_style", style),
        ]);
        self.template(TemplateId::GuidanceHint)
            .render(&b)
            .expect("guidance bindings are always complete")
    }
}

fn stage_description(kind: ElementKind) -> &'static str {
    match kind {
        ElementKind::Protagonist => "the main character the story will be about",
        ElementKind::Location => "the place where the story happens",
        ElementKind::Mood => "how the main character feels",
        ElementKind::ImportantObject => "a special object that matters in the story",
        ElementKind::Activity => "what the main character will be doing",
        ElementKind::SpecialAppearance => "a surprise that will appear in the story",
    }
}

fn cue_instruction(kind: ElementKind) -> &'static str {
    match kind {
        ElementKind::Protagonist => "They have been choosing for a while. Give a concrete imaginative cue: ask them to imagine the tile they like as the hero of the story, to close their eyes and picture that hero doing something amazing, and to pick it if it would make a great hero.",
        ElementKind::Location => "They have been choosing for a while. Give a concrete imaginative cue: ask them to picture where their hero would love to go on an adventure, and to pick the place that feels the most exciting.",
        ElementKind::Mood => "They have been choosing for a while. Give a concrete imaginative cue: ask them to make the face their hero would make in the story, and to pick the feeling that matches it.",
        ElementKind::ImportantObject => "They have been choosing for a while. Give a concrete imaginative cue: ask them to imagine their hero finding something very special, and to pick the object they would most like to find.",
        ElementKind::Activity => "They have been choosing for a while. Give a concrete imaginative cue: ask them to act out with their hands what their hero could be doing, and to pick the activity that would be the most fun.",
        ElementKind::SpecialAppearance => "They have been choosing for a while. Give a concrete imaginative cue: ask them to imagine a big surprise popping up in the story.",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::TupleId;

    fn tuple() -> TileTuple {
        TileTuple {
            protagonist: "a cat".into(),
            location: "a kitchen".into(),
            mood: "happiness".into(),
            important_object: "a black dress".into(),
            activity: "cooking".into(),
            special_appearance: SpecialAppearance::AiChosen,
        }
    }

    fn story(text: &str, loop_index: u32) -> Story {
        Story {
            text: text.into(),
            writer_model: "w".into(),
            loop_index,
            tuple_ref: TupleId("t".into()),
        }
    }

    fn critique(raw: &str) -> Critique {
        Critique {
            score: 74.0,
            rationale: "The cat is charming but the dress barely appears.".into(),
            editor_model: "e".into(),
            raw_text: raw.into(),
        }
    }

    fn rubric_section(prompt: &str) -> &str {
        let start = prompt.find("RUBRIC").unwrap();
        let end = prompt.find("STORY TO EVALUATE").unwrap();
        &prompt[start..end]
    }

    #[test]
    fn writer_first_contains_labels_and_surprise_instruction() {
        let f = PromptForge::builtin();
        let p = f.render_writer_first(&tuple()).unwrap();
        for label in ["a cat", "a kitchen", "happiness", "a black dress", "cooking"] {
            assert!(p.contains(label), "{label}");
        }
        assert!(p.contains(AI_CHOSEN_WRITER_TEXT));
        assert!(!p.contains("Overall Score"));
        assert_eq!(p, f.render_writer_first(&tuple()).unwrap());
    }

    #[test]
    fn writer_first_sections_in_order() {
        let p = PromptForge::builtin().render_writer_first(&tuple()).unwrap();
        let header = p.find("children's author").unwrap();
        let elements = p.find("STORY ELEMENTS").unwrap();
        let guidance = p.find("WHAT MAKES A GOOD STORY").unwrap();
        let values = p.find("THE ELEMENTS FOR THIS STORY").unwrap();
        assert!(header < elements && elements < guidance && guidance < values);
        assert!(p[values..].contains("a cat"));
    }

    #[test]
    fn empty_protagonist_is_a_template_error() {
        let mut t = tuple();
        t.protagonist = String::new();
        assert!(matches!(
            PromptForge::builtin().render_writer_first(&t),
            Err(TemplateError::EmptyValue { .. })
        ));
    }

    #[test]
    fn editor_first_embeds_story_and_rubric() {
        let f = PromptForge::builtin();
        let text = "Mia the cat cooked soup.\nThen she danced in a black dress.";
        let p = f.render_editor_first(&tuple(), &story(text, 1)).unwrap();
        assert!(p.contains(text));
        assert!(p.contains("between 0% and 100%"));
        assert!(p.contains(SCORE_FORMAT_LINE));
        let rubric = rubric_section(&p).to_lowercase();
        for kind in ElementKind::ALL {
            let name = kind.display_name().to_lowercase();
            assert_eq!(rubric.matches(&name).count(), 1, "{name}");
        }
    }

    #[test]
    fn editor_first_rejects_empty_story() {
        assert!(PromptForge::builtin()
            .render_editor_first(&tuple(), &story("   ", 1))
            .is_err());
    }

    #[test]
    fn writer_subsequent_composes_first_prompt() {
        let f = PromptForge::builtin();
        let first = f.render_writer_first(&tuple()).unwrap();
        let c = critique("The cat is charming but the dress barely appears.\nOverall Score: 74%");
        let p = f.render_writer_subsequent(&tuple(), &story("X", 1), &c).unwrap();
        assert!(p.contains(&first));
        assert!(p.contains("\nX\n"));
        assert!(p.contains(&c.rationale));
        assert!(p.len() > first.len());
    }

    #[test]
    fn editor_subsequent_starts_with_first_prompt() {
        let f = PromptForge::builtin();
        let new = story("new story", 2);
        let prev = story("old story", 1);
        let c = critique("meh\nOverall Score: 60%");
        let p = f.render_editor_subsequent(&tuple(), &new, &prev, &c).unwrap();
        assert!(p.starts_with(&f.render_editor_first(&tuple(), &new).unwrap()));
        assert!(p.contains(&c.raw_text));
        assert!(p.contains("old story"));
        assert_eq!(p, f.render_editor_subsequent(&tuple(), &new, &prev, &c).unwrap());
    }

    #[test]
    fn editor_history_labels_loops() {
        let f = PromptForge::builtin();
        let (s1, s2, s3) = (story("one", 1), story("two", 2), story("three", 3));
        let (c1, c2) = (critique("c-one"), critique("c-two"));
        let p = f
            .render_editor_with_history(&tuple(), &s3, &[(&s1, &c1), (&s2, &c2)])
            .unwrap();
        assert!(p.contains("[loop 1]\none") && p.contains("[loop 2]\ntwo"));
        assert!(p.contains("[loop 2]\nc-two"));
    }

    #[test]
    fn guidance_escalates_after_idle_threshold() {
        let f = PromptForge::builtin();
        let calm = f.render_guidance_hint(&GuidanceContext::new(ElementKind::Protagonist, Duration::ZERO));
        assert!(calm.contains("pick the one they like the most"));
        assert!(calm.contains("protagonist"));
        let idle = GuidanceContext::new(ElementKind::Protagonist, Duration::from_secs(45));
        let cue = f.render_guidance_hint(&idle);
        assert!(cue.contains("hero"));
        assert!(cue.contains("imagine"));
        assert_ne!(calm, cue);
        assert_eq!(cue, f.render_guidance_hint(&idle));
        let at = GuidanceContext::new(ElementKind::Protagonist, DEFAULT_IDLE_THRESHOLD);
        assert_eq!(f.render_guidance_hint(&at), calm);
    }

    #[test]
    fn load_rejects_missing_placeholder_per_template() {
        for id in TemplateId::ALL {
            for name in id.required_placeholders() {
                let body = id.builtin_body().replace(&format!("{{{name}}}"), "");
                assert_eq!(
                    PromptTemplate::new(id, &body),
                    Err(TemplateError::MissingPlaceholder {
                        id: id.key(),
                        name: name.to_string()
                    })
                );
            }
        }
    }

    #[test]
    fn load_rejects_unknown_placeholder() {
        let body = format!("{} {{villain}}", TemplateId::WriterFirst.builtin_body());
        assert!(matches!(
            PromptTemplate::new(TemplateId::WriterFirst, &body),
            Err(TemplateError::UnknownPlaceholder { .. })
        ));
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = PromptForge::builtin();
        f.write_dir(dir.path()).unwrap();
        assert_eq!(PromptForge::load_dir(dir.path()).unwrap(), f);
        std::fs::write(dir.path().join("editor_first.txt"), "no placeholders").unwrap();
        assert!(PromptForge::load_dir(dir.path()).is_err());
        std::fs::remove_file(dir.path().join("guidance_hint.txt")).unwrap();
        assert!(matches!(
            PromptForge::load_dir(dir.path()),
            Err(TemplateError::Io { .. }) | Err(TemplateError::MissingPlaceholder { .. })
        ));
    }
}
