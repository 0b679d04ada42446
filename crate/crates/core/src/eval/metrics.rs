//! Text-overlap metrics on a 0–100 scale.
//!
//! Texts are tokenized by [`crate::text::tokenize`]: lowercased
//! alphanumeric runs, every punctuation character its own token.

use std::collections::HashMap;

use crate::text::{stem, tokenize};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("input is empty")]
    EmptyInput,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sufficient statistics of BLEU; adding them is associative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub candidate_len: u64,
    pub reference_len: u64,
}

impl BleuStats {
    pub fn of(candidate: &str, reference: &str) -> Self {
        let c = tokenize(candidate);
        let r = tokenize(reference);
        let mut s = BleuStats {
            candidate_len: c.len() as u64,
            reference_len: r.len() as u64,
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let cc = ngram_counts(&c, n);
            let rc = ngram_counts(&r, n);
            s.totals[n - 1] = c.len().saturating_sub(n - 1) as u64;
            s.matches[n - 1] = cc
                .iter()
                .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)) as u64)
                .sum();
        }
        s
    }

    pub fn merge(self, o: BleuStats) -> BleuStats {
        let mut s = self;
        for i in 0..MAX_ORDER {
            s.matches[i] += o.matches[i];
            s.totals[i] += o.totals[i];
        }
        s.candidate_len += o.candidate_len;
        s.reference_len += o.reference_len;
        s
    }

    fn brevity_penalty(&self) -> f64 {
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        if c == 0.0 {
            0.0
        } else if c < r {
            (1.0 - r / c).exp()
        } else {
            1.0
        }
    }

    /// Unsmoothed BLEU-4; any order without matches (or without
    /// candidate n-grams) gives 0.
    pub fn score(&self) -> f64 {
        let mut log_sum = 0.0;
        for i in 0..MAX_ORDER {
            if self.matches[i] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[i] as f64 / self.totals[i] as f64).ln();
        }
        100.0 * self.brevity_penalty() * (log_sum / MAX_ORDER as f64).exp()
    }

    /// BLEU-4 with +1 added to numerator and denominator for orders ≥ 2.
    pub fn smoothed_score(&self) -> f64 {
        if self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = (self.matches[0] as f64 / self.totals[0] as f64).ln();
        for i in 1..MAX_ORDER {
            log_sum += ((self.matches[i] + 1) as f64 / (self.totals[i] + 1) as f64).ln();
        }
        100.0 * self.brevity_penalty() * (log_sum / MAX_ORDER as f64).exp()
    }
}

/// Corpus-level BLEU-4, uniform weights, unsmoothed.
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[R]) -> Result<f64, MetricError> {
    if candidates.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let stats = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| BleuStats::of(c.as_ref(), r.as_ref()))
        .fold(BleuStats::default(), BleuStats::merge);
    Ok(stats.score())
}

pub fn sentence_bleu(candidate: &str, reference: &str) -> f64 {
    BleuStats::of(candidate, reference).smoothed_score()
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS F1.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    let l = lcs_len(&c, &r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / c.len() as f64;
    let rec = l / r.len() as f64;
    100.0 * 2.0 * p * rec / (p + rec)
}

/// Matched (candidate index, reference index) pairs: exact surface
/// matches first, then stem matches, each greedily left to right.
pub fn meteor_alignment(candidate: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut ref_used = vec![false; reference.len()];
    let mut cand_used = vec![false; candidate.len()];
    let mut pairs = Vec::new();
    let stages: [fn(&str) -> String; 2] = [|w| w.to_owned(), stem];
    for norm in stages {
        let ref_norm: Vec<String> = reference.iter().map(|w| norm(w)).collect();
        for (i, w) in candidate.iter().enumerate() {
            if cand_used[i] {
                continue;
            }
            let w = norm(w);
            if let Some(j) = (0..reference.len()).find(|&j| !ref_used[j] && ref_norm[j] == w) {
                ref_used[j] = true;
                cand_used[i] = true;
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Runs of matches adjacent in both candidate and reference.
pub fn chunk_count(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// F_mean = 10PR/(R+9P), penalty = 0.5·(chunks/matches)³.
pub fn meteor(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    let pairs = meteor_alignment(&c, &r);
    let m = pairs.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let p = m / c.len() as f64;
    let rec = m / r.len() as f64;
    let fmean = 10.0 * p * rec / (rec + 9.0 * p);
    let penalty = 0.5 * (chunk_count(&pairs) as f64 / m).powi(3);
    100.0 * fmean * (1.0 - penalty)
}

/// Round to two decimals.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}
