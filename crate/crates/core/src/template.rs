//! Minimal `{name}` placeholder templates.
//!
//! Templates are parsed once into literal/placeholder segments; unknown
//! placeholders are rejected at parse time. Values are spliced verbatim and
//! never re-scanned, so braces inside data stay literal.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unknown placeholder {{{name}}} in template \"{template_id}\"")]
    UnknownPlaceholder { template_id: String, name: String },
}

#[derive(Debug, Clone)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

/// A parsed placeholder template.
#[derive(Debug, Clone)]
pub struct Template {
    segments: Vec<Segment>,
}

impl Template {
    /// Parses `text`, accepting only placeholders named in `allowed`.
    ///
    /// A placeholder is `{` + lowercase identifier + `}`; any other brace
    /// sequence is literal text.
    pub fn parse(template_id: &str, text: &str, allowed: &[&str]) -> Result<Self, TemplateError> {
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut rest = text;
        while let Some(open) = rest.find('{') {
            let (before, from_open) = rest.split_at(open);
            literal.push_str(before);
            let candidate = &from_open[1..];
            match candidate.find('}') {
                Some(close) if is_placeholder_name(&candidate[..close]) => {
                    let name = &candidate[..close];
                    if !allowed.contains(&name) {
                        return Err(TemplateError::UnknownPlaceholder {
                            template_id: template_id.to_string(),
                            name: name.to_string(),
                        });
                    }
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    segments.push(Segment::Placeholder(name.to_string()));
                    rest = &candidate[close + 1..];
                }
                _ => {
                    literal.push('{');
                    rest = candidate;
                }
            }
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        Ok(Self { segments })
    }

    /// Renders the template; placeholders missing from `values` become empty.
    pub fn render(&self, values: &BTreeMap<&str, String>) -> String {
        let mut out = String::new();
        for segment in &self.segments {
            match segment {
                Segment::Literal(text) => out.push_str(text),
                Segment::Placeholder(name) => {
                    if let Some(value) = values.get(name.as_str()) {
                        out.push_str(value);
                    }
                }
            }
        }
        out
    }
}

fn is_placeholder_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

#[cfg(test)]
mod tests {
    use super::*;

    fn values(pairs: &[(&'static str, &str)]) -> BTreeMap<&'static str, String> {
        pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
    }

    #[test]
    fn renders_placeholders() {
        let t = Template::parse("t", "Q: {question} -> {choice}.", &["question", "choice"]).unwrap();
        assert_eq!(
            t.render(&values(&[("question", "stem"), ("choice", "A")])),
            "Q: stem -> A."
        );
    }

    #[test]
    fn unknown_placeholder_rejected_at_parse_time() {
        let err = Template::parse("t", "{nope}", &["question"]).unwrap_err();
        assert_eq!(
            err,
            TemplateError::UnknownPlaceholder {
                template_id: "t".into(),
                name: "nope".into()
            }
        );
    }

    #[test]
    fn stray_braces_are_literal() {
        let t = Template::parse("t", "set {1, 2} and {question}", &["question"]).unwrap();
        assert_eq!(t.render(&values(&[("question", "q")])), "set {1, 2} and q");
    }

    #[test]
    fn values_are_not_rescanned() {
        let t = Template::parse("t", "{question}", &["question"]).unwrap();
        assert_eq!(t.render(&values(&[("question", "{choice}")])), "{choice}");
    }
}
