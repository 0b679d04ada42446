//! Sentence splitting, tokenization and stemming.

use std::sync::OnceLock;

use rust_stemmers::{Algorithm, Stemmer};

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Split on `.` `!` `?`, except a period between two digits.
/// Sentences keep their terminal punctuation and are trimmed.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut current = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        current.push(c);
        if is_terminal(c) {
            let decimal = c == '.'
                && i > 0
                && chars[i - 1].is_ascii_digit()
                && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
            if !decimal {
                while let Some(&n) = chars.get(i + 1) {
                    if is_terminal(n) || n == '"' || n == '\'' || n == ')' {
                        current.push(n);
                        i += 1;
                    } else {
                        break;
                    }
                }
                let s = current.trim();
                if !s.is_empty() {
                    out.push(s.to_owned());
                }
                current.clear();
            }
        }
        i += 1;
    }
    let s = current.trim();
    if !s.is_empty() {
        out.push(s.to_owned());
    }
    out
}

/// First sentence, guaranteed to end with terminal punctuation.
pub fn first_sentence(text: &str) -> String {
    let mut s = split_sentences(text).into_iter().next().unwrap_or_default();
    if !s.is_empty() && !s.trim_end_matches(['"', '\'', ')']).ends_with(is_terminal) {
        s.push('.');
    }
    s
}

/// Lowercased tokens: runs of alphanumerics, every other
/// non-space character on its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                tokens.push(c.to_lowercase().collect());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Alphanumeric words with camelCase boundaries split, lowercased.
pub fn content_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut word = String::new();
    let mut prev_lower = false;
    for c in text.chars() {
        if c.is_alphanumeric() {
            if c.is_uppercase() && prev_lower && !word.is_empty() {
                words.push(std::mem::take(&mut word));
            }
            prev_lower = c.is_lowercase() || c.is_ascii_digit();
            word.extend(c.to_lowercase());
        } else {
            prev_lower = false;
            if !word.is_empty() {
                words.push(std::mem::take(&mut word));
            }
        }
    }
    if !word.is_empty() {
        words.push(word);
    }
    words
}

fn stemmer() -> &'static Stemmer {
    static STEMMER: OnceLock<Stemmer> = OnceLock::new();
    STEMMER.get_or_init(|| Stemmer::create(Algorithm::English))
}

pub fn stem(word: &str) -> String {
    stemmer().stem(word).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentences_respect_decimals() {
        assert_eq!(
            split_sentences("It has 2.5 baths. Nice garden! Pool?"),
            vec!["It has 2.5 baths.", "Nice garden!", "Pool?"]
        );
        assert_eq!(split_sentences("No terminal"), vec!["No terminal"]);
        assert!(split_sentences("   ").is_empty());
        assert_eq!(split_sentences("Wow!!! Really."), vec!["Wow!!!", "Really."]);
    }

    #[test]
    fn first_sentence_truncates_and_terminates() {
        assert_eq!(first_sentence("One. Two."), "One.");
        assert_eq!(first_sentence("No stop"), "No stop.");
    }

    #[test]
    fn tokens_split_punctuation() {
        assert_eq!(tokenize("The cat, sat."), vec!["the", "cat", ",", "sat", "."]);
        assert_eq!(tokenize("  "), Vec::<String>::new());
    }

    #[test]
    fn camel_case_words() {
        assert_eq!(
            content_words("house | hasBedrooms | 3"),
            vec!["house", "has", "bedrooms", "3"]
        );
    }

    #[test]
    fn stems() {
        assert_eq!(stem("bedrooms"), stem("bedroom"));
        assert_eq!(stem("running"), "run");
    }
}
