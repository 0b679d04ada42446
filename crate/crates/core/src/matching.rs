//! Deterministic feature-to-structured-data matching.

use std::collections::HashSet;

use crate::linearize::{delinearize, LinearizedText};
use crate::model::{canonical_key, StructuredData, StructuredKind};
use crate::text::{content_words, stem};

fn stems(text: &str) -> HashSet<String> {
    content_words(text).iter().map(|w| stem(w)).collect()
}

/// A feature key is aligned with a linearized line when it is a substring
/// of the lowercased line, or when every stemmed word of the key occurs
/// among the stemmed words of the line (camelCase split).
pub fn text_aligned(key: &str, line: &str) -> bool {
    let key = canonical_key(key);
    if key.is_empty() {
        return false;
    }
    if canonical_key(line).contains(&key) {
        return true;
    }
    let key_stems = stems(&key);
    !key_stems.is_empty() && key_stems.is_subset(&stems(line))
}

pub fn text_aligned_any<S: AsRef<str>>(key: &str, lines: &[S]) -> bool {
    lines.iter().any(|l| text_aligned(key, l.as_ref()))
}

/// Canonical object / value keys of structured data.
pub fn structured_value_keys(data: &StructuredData) -> Vec<String> {
    data.values().into_iter().map(canonical_key).collect()
}

/// Parse linearized text of unknown kind back into structured data.
pub fn parse_linearized(text: &str) -> Option<StructuredData> {
    [StructuredKind::Kg, StructuredKind::Table]
        .into_iter()
        .find_map(|kind| {
            delinearize(&LinearizedText {
                text: text.to_owned(),
                kind,
            })
            .ok()
        })
}
