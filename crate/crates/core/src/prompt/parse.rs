//! Parsers for model answers. Every parser is total: it returns a value
//! or a typed error for any input string.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;

use crate::model::{canonicalize_feature, dedup_features, Feature, FeatureLabel, FeatureOrigin};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("no feature list found in model output")]
    NoListFound,
    #[error("unparsable verdict: {0}")]
    UnparsableVerdict(String),
    #[error("feature {0:?} listed in both sections")]
    Overlap(String),
}

fn numbered_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*\d+\s*[.)]\s+(.+?)\s*$").unwrap())
}

fn bracket_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[([^\[\]]*)\]").unwrap())
}

fn verdict_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^\s*label\s*:\s*([a-z][a-z _-]*?)\s*\|\s*rationale\s*:\s*(.*?)\s*$").unwrap())
}

fn clean_item(raw: &str) -> &str {
    raw.trim().trim_end_matches(['.', ';', ',']).trim()
}

/// Parse a numbered (`1. x`) or bracketed (`[x]; [y]`) list. Numbered
/// lines win when both grammars occur. Duplicates by key keep the first.
pub fn parse_feature_list(output: &str, origin: FeatureOrigin) -> Result<Vec<Feature>, ParseError> {
    let numbered: Vec<&str> = output
        .lines()
        .filter_map(|l| numbered_re().captures(l).map(|c| c.get(1).unwrap().as_str()))
        .collect();
    let items: Vec<&str> = if numbered.is_empty() {
        bracket_re()
            .captures_iter(output)
            .map(|c| c.get(1).unwrap().as_str())
            .collect()
    } else {
        numbered
    };
    let features: Vec<Feature> = items
        .into_iter()
        .filter_map(|i| canonicalize_feature(clean_item(i), origin).ok())
        .collect();
    if features.is_empty() {
        return Err(ParseError::NoListFound);
    }
    Ok(dedup_features(features))
}

/// Like [`parse_feature_list`] but an answer with no items is an empty list.
pub fn parse_feature_list_or_empty(output: &str, origin: FeatureOrigin) -> Vec<Feature> {
    parse_feature_list(output, origin).unwrap_or_default()
}

/// Parse `label: <L> | rationale: <R>` from the first matching line.
pub fn parse_classification(output: &str) -> Result<(FeatureLabel, String), ParseError> {
    for line in output.lines() {
        let Some(c) = verdict_re().captures(line) else {
            continue;
        };
        let label: FeatureLabel = c[1].parse().map_err(|e: String| ParseError::UnparsableVerdict(e))?;
        let rationale = c[2].to_owned();
        if rationale.is_empty() && label != FeatureLabel::Hallucinated {
            return Err(ParseError::UnparsableVerdict(format!("empty rationale for {label}")));
        }
        return Ok((label, rationale));
    }
    Err(ParseError::UnparsableVerdict(truncate(output)))
}

pub fn format_classification(label: FeatureLabel, rationale: &str) -> String {
    format!("label: {label} | rationale: {rationale}")
}

fn truncate(s: &str) -> String {
    let mut t: String = s.chars().take(80).collect();
    if t.len() < s.len() {
        t.push('…');
    }
    t
}

/// Split into two headed sections, e.g. `VISIBLE:` / `NOT VISIBLE:`.
fn parse_sections(
    output: &str,
    first: &str,
    second: &str,
    origin: FeatureOrigin,
) -> Result<(Vec<Feature>, Vec<Feature>), ParseError> {
    let heading = |line: &str, name: &str| {
        let t = line.trim();
        t.strip_suffix(':').is_some_and(|h| h.trim().eq_ignore_ascii_case(name))
    };
    let mut a_body: Option<Vec<&str>> = None;
    let mut b_body: Option<Vec<&str>> = None;
    let mut current: Option<u8> = None;
    for line in output.lines() {
        if heading(line, first) {
            if a_body.is_some() {
                return Err(ParseError::UnparsableVerdict(format!("{first} section repeated")));
            }
            a_body = Some(Vec::new());
            current = Some(0);
        } else if heading(line, second) {
            if b_body.is_some() {
                return Err(ParseError::UnparsableVerdict(format!("{second} section repeated")));
            }
            b_body = Some(Vec::new());
            current = Some(1);
        } else {
            match current {
                Some(0) => a_body.as_mut().unwrap().push(line),
                Some(_) => b_body.as_mut().unwrap().push(line),
                None => {}
            }
        }
    }
    let (Some(a), Some(b)) = (a_body, b_body) else {
        return Err(ParseError::UnparsableVerdict(format!(
            "expected {first}: and {second}: sections"
        )));
    };
    let section = |lines: Vec<&str>| -> Result<Vec<Feature>, ParseError> {
        let body = lines.join("\n");
        match parse_feature_list(&body, origin) {
            Ok(f) => Ok(f),
            Err(ParseError::NoListFound) if is_empty_section(&body) => Ok(Vec::new()),
            Err(_) => Err(ParseError::UnparsableVerdict(truncate(body.trim()))),
        }
    };
    let a = section(a)?;
    let b = section(b)?;
    let keys: HashSet<&str> = a.iter().map(|f| f.key.as_str()).collect();
    if let Some(dup) = b.iter().find(|f| keys.contains(f.key.as_str())) {
        return Err(ParseError::Overlap(dup.display.clone()));
    }
    Ok((a, b))
}

fn is_empty_section(body: &str) -> bool {
    let t = body.trim().trim_end_matches('.').trim();
    t.is_empty() || t.eq_ignore_ascii_case("none") || t == "-"
}

pub fn parse_visibility(output: &str, origin: FeatureOrigin) -> Result<(Vec<Feature>, Vec<Feature>), ParseError> {
    parse_sections(output, "visible", "not visible", origin)
}

pub fn parse_saliency(output: &str, origin: FeatureOrigin) -> Result<(Vec<Feature>, Vec<Feature>), ParseError> {
    parse_sections(output, "salient", "not salient", origin)
}

/// `1. a\n2. b`, or `None.` for an empty list.
pub fn format_numbered<S: AsRef<str>>(items: &[S]) -> String {
    if items.is_empty() {
        return "None.".to_owned();
    }
    items
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// `[a]; [b]`.
pub fn format_bracketed<S: AsRef<str>>(items: &[S]) -> String {
    items
        .iter()
        .map(|s| format!("[{}]", s.as_ref()))
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn format_sections<S: AsRef<str>>(first: &str, a: &[S], second: &str, b: &[S]) -> String {
    let body = |items: &[S]| {
        if items.is_empty() {
            String::new()
        } else {
            format!("{}\n", format_numbered(items))
        }
    };
    format!("{first}:\n{}{second}:\n{}", body(a), body(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const O: FeatureOrigin = FeatureOrigin::GeneratedText;

    fn keys(fs: &[Feature]) -> Vec<&str> {
        fs.iter().map(|f| f.key.as_str()).collect()
    }

    #[test]
    fn numbered_list() {
        let f = parse_feature_list("1. pleated skirt\n2. mint green color", O).unwrap();
        assert_eq!(keys(&f), ["pleated skirt", "mint green color"]);
    }

    #[test]
    fn bracketed_list() {
        let f = parse_feature_list("[white porch]; [picket fence]", O).unwrap();
        assert_eq!(keys(&f), ["white porch", "picket fence"]);
    }

    #[test]
    fn no_list() {
        assert_eq!(
            parse_feature_list("I could not find features.", O),
            Err(ParseError::NoListFound)
        );
        assert_eq!(parse_feature_list("None.", O), Err(ParseError::NoListFound));
    }

    #[test]
    fn duplicates_keep_first() {
        let f = parse_feature_list("1. Garden\n2. porch\n3. garden", O).unwrap();
        assert_eq!(keys(&f), ["garden", "porch"]);
        assert_eq!(f[0].display, "Garden");
    }

    #[test]
    fn trailing_punctuation_dropped() {
        let f = parse_feature_list("1) tiled roof.\n2. bay window;", O).unwrap();
        assert_eq!(keys(&f), ["tiled roof", "bay window"]);
    }

    #[test]
    fn classification() {
        assert_eq!(
            parse_classification("label: salient | rationale: Picket fences attract buyers.").unwrap(),
            (FeatureLabel::Salient, "Picket fences attract buyers.".to_owned())
        );
        assert_eq!(
            parse_classification("label: hallucinated | rationale: The feature is not visible in the image.").unwrap(),
            (
                FeatureLabel::Hallucinated,
                crate::model::HALLUCINATED_RATIONALE.to_owned()
            )
        );
        assert_eq!(
            parse_classification("Label: NON-SALIENT | Rationale: Minor.")
                .unwrap()
                .0,
            FeatureLabel::NonSalient
        );
        assert!(matches!(
            parse_classification("maybe salient?"),
            Err(ParseError::UnparsableVerdict(_))
        ));
        assert!(parse_classification("label: salient | rationale:").is_err());
        assert_eq!(parse_classification("label: hallucinated | rationale:").unwrap().1, "");
        assert!(parse_classification("label: gorgeous | rationale: x").is_err());
    }

    #[test]
    fn visibility_sections() {
        let (v, n) = parse_visibility("VISIBLE:\n1. picket fence\nNOT VISIBLE:\n1. swimming pool", O).unwrap();
        assert_eq!(keys(&v), ["picket fence"]);
        assert_eq!(keys(&n), ["swimming pool"]);

        let (v, n) = parse_visibility("VISIBLE:\nNOT VISIBLE:\n1. cellar", O).unwrap();
        assert!(v.is_empty());
        assert_eq!(keys(&n), ["cellar"]);

        assert_eq!(
            parse_visibility("VISIBLE:\n1. cellar\nNOT VISIBLE:\n1. Cellar", O),
            Err(ParseError::Overlap("Cellar".into()))
        );
        assert!(matches!(
            parse_visibility("1. cellar", O),
            Err(ParseError::UnparsableVerdict(_))
        ));
        assert!(matches!(
            parse_visibility("VISIBLE:\nsome prose\nNOT VISIBLE:\n", O),
            Err(ParseError::UnparsableVerdict(_))
        ));
    }

    #[test]
    fn formatters_round_trip() {
        let items = ["a b", "c"];
        assert_eq!(keys(&parse_feature_list(&format_numbered(&items), O).unwrap()), items);
        assert_eq!(keys(&parse_feature_list(&format_bracketed(&items), O).unwrap()), items);
        let s = format_sections("SALIENT", &items[..1], "NOT SALIENT", &items[1..]);
        let (a, b) = parse_saliency(&s, O).unwrap();
        assert_eq!((keys(&a), keys(&b)), (vec!["a b"], vec!["c"]));
    }

    proptest! {
        #[test]
        fn parsers_are_total(s in "\\PC{0,200}") {
            let _ = parse_feature_list(&s, O);
            let _ = parse_classification(&s);
            let _ = parse_visibility(&s, O);
            let _ = parse_saliency(&s, O);
        }

        #[test]
        fn parsers_total_on_structured_noise(s in "(VISIBLE:|NOT VISIBLE:|label:|rationale:|\\||\\[|\\]|;|[0-9]\\.|\n| |[a-z]){0,60}") {
            let _ = parse_feature_list(&s, O);
            let _ = parse_classification(&s);
            let _ = parse_visibility(&s, O);
        }
    }
}
