//! Flat text rendering of structured data for prompts.
//!
//! Grammar, one item per line:
//!
//! ```text
//! kg:    subject | relation | object
//! table: attribute: value
//! ```
//!
//! Inside a field `\` `|` `:` and newline are written as `\\` `\|` `\:` `\n`.

use crate::model::{AttributePair, StructuredData, StructuredKind, Triple};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearizedText {
    pub text: String,
    pub kind: StructuredKind,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("line {line}: {reason}")]
pub struct ParseError {
    pub line: usize,
    pub reason: String,
}

fn escape(field: &str) -> String {
    let mut out = String::with_capacity(field.len());
    for c in field.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '|' => out.push_str("\\|"),
            ':' => out.push_str("\\:"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

/// Split on unescaped `sep`, returning still-escaped pieces.
fn split_unescaped(line: &str, sep: char, max: usize) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut start = 0;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        if escaped {
            escaped = false;
            continue;
        }
        if c == '\\' {
            escaped = true;
        } else if c == sep && parts.len() + 1 < max {
            parts.push(&line[start..i]);
            start = i + c.len_utf8();
        }
    }
    parts.push(&line[start..]);
    parts
}

fn unescape(field: &str, line: usize) -> Result<String, ParseError> {
    let mut out = String::with_capacity(field.len());
    let mut chars = field.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            if c == '|' || c == ':' {
                return Err(ParseError {
                    line,
                    reason: format!("unescaped {c:?} inside a field"),
                });
            }
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('|') => out.push('|'),
            Some(':') => out.push(':'),
            Some('n') => out.push('\n'),
            other => {
                return Err(ParseError {
                    line,
                    reason: format!("bad escape sequence \\{}", other.map(String::from).unwrap_or_default()),
                })
            }
        }
    }
    Ok(out)
}

pub fn linearize(data: &StructuredData) -> LinearizedText {
    let lines: Vec<String> = match data {
        StructuredData::Kg(triples) => triples
            .iter()
            .map(|t| {
                format!(
                    "{} | {} | {}",
                    escape(&t.subject),
                    escape(&t.relation),
                    escape(&t.object)
                )
            })
            .collect(),
        StructuredData::Table(pairs) => pairs
            .iter()
            .map(|p| format!("{}: {}", escape(&p.attribute), escape(&p.value)))
            .collect(),
    };
    LinearizedText {
        text: lines.join("\n"),
        kind: data.kind(),
    }
}

/// Each rendered line, for per-line matching.
pub fn linearized_lines(data: &StructuredData) -> Vec<String> {
    linearize(data).text.lines().map(str::to_owned).collect()
}

pub fn delinearize(text: &LinearizedText) -> Result<StructuredData, ParseError> {
    let mut triples = Vec::new();
    let mut pairs = Vec::new();
    for (idx, line) in text.text.split('\n').enumerate() {
        let n = idx + 1;
        match text.kind {
            StructuredKind::Kg => {
                let parts = split_unescaped(line, '|', usize::MAX);
                if parts.len() != 3 {
                    return Err(ParseError {
                        line: n,
                        reason: format!("expected 3 fields, found {}", parts.len()),
                    });
                }
                let subject = parts[0].strip_suffix(' ');
                let relation = parts[1].strip_prefix(' ').and_then(|p| p.strip_suffix(' '));
                let object = parts[2].strip_prefix(' ');
                let (Some(s), Some(r), Some(o)) = (subject, relation, object) else {
                    return Err(ParseError {
                        line: n,
                        reason: "fields must be separated by \" | \"".into(),
                    });
                };
                triples.push(Triple::new(unescape(s, n)?, unescape(r, n)?, unescape(o, n)?));
            }
            StructuredKind::Table => {
                let parts = split_unescaped(line, ':', 2);
                let (Some(attr), Some(rest)) = (parts.first(), parts.get(1)) else {
                    return Err(ParseError {
                        line: n,
                        reason: "missing \":\" separator".into(),
                    });
                };
                let value = rest.strip_prefix(' ').ok_or_else(|| ParseError {
                    line: n,
                    reason: "expected a space after \":\"".into(),
                })?;
                pairs.push(AttributePair::new(unescape(attr, n)?, unescape(value, n)?));
            }
        }
    }
    Ok(match text.kind {
        StructuredKind::Kg => StructuredData::Kg(triples),
        StructuredKind::Table => StructuredData::Table(pairs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kg_line() {
        let kg = StructuredData::Kg(vec![Triple::new("house", "hasBedrooms", "3")]);
        let lin = linearize(&kg);
        assert_eq!(lin.text, "house | hasBedrooms | 3");
        assert_eq!(delinearize(&lin).unwrap(), kg);
    }

    #[test]
    fn table_line() {
        let t = StructuredData::Table(vec![AttributePair::new("color", "mint green")]);
        assert_eq!(linearize(&t).text, "color: mint green");
        let back = delinearize(&LinearizedText {
            text: "color: mint green".into(),
            kind: StructuredKind::Table,
        })
        .unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn pipe_is_escaped() {
        let kg = StructuredData::Kg(vec![Triple::new("a", "r", "x|y")]);
        assert_eq!(linearize(&kg).text, "a | r | x\\|y");
    }

    #[test]
    fn arity_violation() {
        let err = delinearize(&LinearizedText {
            text: "house | hasBedrooms".into(),
            kind: StructuredKind::Kg,
        })
        .unwrap_err();
        assert_eq!(err.line, 1);
    }

    #[test]
    fn multi_line_preserves_order() {
        let kg = StructuredData::Kg(vec![
            Triple::new("house", "hasBedrooms", "3"),
            Triple::new("house", "locatedIn", "Springfield"),
        ]);
        assert_eq!(
            linearize(&kg).text,
            "house | hasBedrooms | 3\nhouse | locatedIn | Springfield"
        );
    }

    fn field() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9 |:\\\\\n]{0,12}".prop_filter("non-empty after trim", |s: &String| !s.trim().is_empty())
    }

    proptest! {
        #[test]
        fn kg_round_trip(triples in prop::collection::vec((field(), field(), field()), 1..6)) {
            let kg = StructuredData::Kg(triples.into_iter().map(|(s, r, o)| Triple::new(s, r, o)).collect());
            let lin = linearize(&kg);
            prop_assert_eq!(delinearize(&lin).unwrap(), kg.clone());
            prop_assert_eq!(linearize(&kg), lin);
        }

        #[test]
        fn table_round_trip(pairs in prop::collection::vec((field(), field()), 1..6)) {
            let t = StructuredData::Table(pairs.into_iter().map(|(a, v)| AttributePair::new(a, v)).collect());
            prop_assert_eq!(delinearize(&linearize(&t)).unwrap(), t);
        }
    }
}
