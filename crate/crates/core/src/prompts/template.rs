use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(String),
}

/// A body with `{name}` placeholders. `{{` and `}}` produce literal braces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SyntaxError {
    #[error("unclosed `{{` at byte {0}")]
    Unclosed(usize),
    #[error("stray `}}` at byte {0}")]
    StrayClose(usize),
    #[error("invalid placeholder name `{0}`")]
    BadName(String),
}

impl Template {
    pub fn parse(body: &str) -> Result<Template, SyntaxError> {
        let mut segments = Vec::new();
        let mut text = String::new();
        let mut chars = body.char_indices().peekable();
        while let Some((pos, c)) = chars.next() {
            match c {
                '{' if chars.peek().map(|&(_, n)| n) == Some('{') => {
                    chars.next();
                    text.push('{');
                }
                '}' if chars.peek().map(|&(_, n)| n) == Some('}') => {
                    chars.next();
                    text.push('}');
                }
                '}' => return Err(SyntaxError::StrayClose(pos)),
                '{' => {
                    let mut name = String::new();
                    let mut closed = false;
                    for (_, n) in chars.by_ref() {
                        if n == '}' {
                            closed = true;
                            break;
                        }
                        name.push(n);
                    }
                    if !closed {
                        return Err(SyntaxError::Unclosed(pos));
                    }
                    let valid = !name.is_empty()
                        && name
                            .chars()
                            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_');
                    if !valid {
                        return Err(SyntaxError::BadName(name));
                    }
                    if !text.is_empty() {
                        segments.push(Segment::Text(std::mem::take(&mut text)));
                    }
                    segments.push(Segment::Slot(name));
                }
                other => text.push(other),
            }
        }
        if !text.is_empty() {
            segments.push(Segment::Text(text));
        }
        Ok(Template { segments })
    }

    pub fn placeholders(&self) -> BTreeSet<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot(n) => Some(n.as_str()),
                Segment::Text(_) => None,
            })
            .collect()
    }

    /// Substitutes every placeholder. Returns the first name without a binding.
    pub fn render(&self, binding: &BTreeMap<&str, &str>) -> Result<String, String> {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(name) => {
                    out.push_str(binding.get(name.as_str()).ok_or_else(|| name.clone())?)
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_slots_and_escapes() {
        let t = Template::parse("Hi {name}, {{literal}} {name}!").unwrap();
        assert_eq!(t.placeholders().into_iter().collect::<Vec<_>>(), ["name"]);
        let b = BTreeMap::from([("name", "Ana")]);
        assert_eq!(t.render(&b).unwrap(), "Hi Ana, {literal} Ana!");
    }

    #[test]
    fn syntax_errors() {
        assert_eq!(Template::parse("a {b"), Err(SyntaxError::Unclosed(2)));
        assert_eq!(Template::parse("a } b"), Err(SyntaxError::StrayClose(2)));
        assert_eq!(
            Template::parse("{Bad Name}"),
            Err(SyntaxError::BadName("Bad Name".into()))
        );
        assert_eq!(Template::parse("{}"), Err(SyntaxError::BadName(String::new())));
    }

    #[test]
    fn unbound_slot_is_reported() {
        let t = Template::parse("{a}{b}").unwrap();
        assert_eq!(t.render(&BTreeMap::from([("a", "x")])), Err("b".to_string()));
    }

    #[test]
    fn values_are_not_reinterpreted() {
        let t = Template::parse("{a}").unwrap();
        assert_eq!(t.render(&BTreeMap::from([("a", "{b}")])).unwrap(), "{b}");
    }
}
