//! Brute-force metric oracles: exhaustive n-gram counting, exhaustive LCS
//! by subset enumeration and direct formula evaluation. Values are on the
//! 0–1 scale. Inputs are whitespace-separated lowercase tokens, so plain
//! splitting agrees with the library tokenizer.

#![allow(dead_code)]

use visicrit_core::eval::metrics;

fn toks(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn ngrams<'a>(t: &[&'a str], n: usize) -> Vec<Vec<&'a str>> {
    if t.len() < n {
        return vec![];
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

/// Clipped matches and candidate totals for order `n`, by linear scans.
fn clipped(c: &[&str], r: &[&str], n: usize) -> (usize, usize) {
    let cg = ngrams(c, n);
    let rg = ngrams(r, n);
    let mut seen: Vec<&Vec<&str>> = Vec::new();
    let mut matches = 0;
    for g in &cg {
        if seen.contains(&g) {
            continue;
        }
        seen.push(g);
        let in_c = cg.iter().filter(|x| *x == g).count();
        let in_r = rg.iter().filter(|x| *x == g).count();
        matches += in_c.min(in_r);
    }
    (matches, cg.len())
}

fn brevity(c: usize, r: usize) -> f64 {
    if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Corpus BLEU-4 without smoothing, as a product of precisions.
pub fn corpus_bleu(pairs: &[(&str, &str)]) -> f64 {
    let mut m = [0usize; 4];
    let mut t = [0usize; 4];
    let (mut cl, mut rl) = (0, 0);
    for (c, r) in pairs {
        let (c, r) = (toks(c), toks(r));
        cl += c.len();
        rl += r.len();
        for n in 1..=4 {
            let (a, b) = clipped(&c, &r, n);
            m[n - 1] += a;
            t[n - 1] += b;
        }
    }
    if m.contains(&0) {
        return 0.0;
    }
    let prod: f64 = (0..4).map(|i| m[i] as f64 / t[i] as f64).product();
    brevity(cl, rl) * prod.powf(0.25)
}

/// Sentence BLEU-4 with +1 on both counts for orders 2 to 4.
pub fn sentence_bleu(c: &str, r: &str) -> f64 {
    let (c, r) = (toks(c), toks(r));
    let (m1, t1) = clipped(&c, &r, 1);
    if m1 == 0 {
        return 0.0;
    }
    let mut prod = m1 as f64 / t1 as f64;
    for n in 2..=4 {
        let (a, b) = clipped(&c, &r, n);
        prod *= (a + 1) as f64 / (b + 1) as f64;
    }
    brevity(c.len(), r.len()) * prod.powf(0.25)
}

fn is_subsequence(sub: &[&str], of: &[&str]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|s| it.any(|x| x == s))
}

/// Longest common subsequence by trying every subset of the shorter side.
pub fn lcs(a: &str, b: &str) -> usize {
    let (a, b) = (toks(a), toks(b));
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    assert!(short.len() <= 16, "oracle is exponential");
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let k = mask.count_ones() as usize;
        if k <= best {
            continue;
        }
        let sub: Vec<&str> = (0..short.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| short[i])
            .collect();
        if is_subsequence(&sub, &long) {
            best = k;
        }
    }
    best
}

pub fn rouge_l(c: &str, r: &str) -> f64 {
    let l = lcs(c, r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, rec) = (l / toks(c).len() as f64, l / toks(r).len() as f64);
    2.0 * p * rec / (p + rec)
}

/// METEOR straight from its definition given hand-counted matches and
/// chunks.
pub fn meteor_formula(matches: usize, chunks: usize, cand_len: usize, ref_len: usize) -> f64 {
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let p = m / cand_len as f64;
    let r = m / ref_len as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    fmean * (1.0 - 0.5 * (chunks as f64 / m).powi(3))
}

#[derive(Debug, Clone)]
pub enum Case {
    CorpusBleu(Vec<(&'static str, &'static str)>),
    SentenceBleu(&'static str, &'static str),
    RougeL(&'static str, &'static str),
    /// Candidate, reference, hand-counted matches and chunks.
    Meteor(&'static str, &'static str, usize, usize),
}

impl Case {
    pub fn name(&self) -> String {
        match self {
            Case::CorpusBleu(p) => format!("bleu{p:?}"),
            Case::SentenceBleu(c, r) => format!("sentence_bleu({c:?}, {r:?})"),
            Case::RougeL(c, r) => format!("rouge_l({c:?}, {r:?})"),
            Case::Meteor(c, r, ..) => format!("meteor({c:?}, {r:?})"),
        }
    }

    /// (library value, oracle value), both on the 0–1 scale.
    pub fn evaluate(&self) -> (f64, f64) {
        match self {
            Case::CorpusBleu(p) => {
                let c: Vec<&str> = p.iter().map(|x| x.0).collect();
                let r: Vec<&str> = p.iter().map(|x| x.1).collect();
                (metrics::bleu(&c, &r).unwrap() / 100.0, corpus_bleu(p))
            }
            Case::SentenceBleu(c, r) => (metrics::sentence_bleu(c, r) / 100.0, sentence_bleu(c, r)),
            Case::RougeL(c, r) => (metrics::rouge_l(c, r) / 100.0, rouge_l(c, r)),
            Case::Meteor(c, r, m, ch) => (
                metrics::meteor(c, r) / 100.0,
                meteor_formula(*m, *ch, toks(c).len(), toks(r).len()),
            ),
        }
    }
}

pub fn cases() -> Vec<Case> {
    use Case::*;
    vec![
        CorpusBleu(vec![("the cat sat on the mat", "the cat sat on the mat")]),
        CorpusBleu(vec![("the cat sat", "the cat sat on the mat")]),
        CorpusBleu(vec![("apple banana cherry date", "wolf xray yak zebra")]),
        CorpusBleu(vec![
            (
                "the house has a large timber deck at the back",
                "the house has a timber deck at the back",
            ),
            (
                "north facing garden with a big lemon tree",
                "a north facing garden with a lemon tree",
            ),
        ]),
        CorpusBleu(vec![
            ("the the the the the the the", "the cat is on the mat"),
            ("there is a cat on the mat", "the cat is on the mat"),
        ]),
        CorpusBleu(vec![
            (
                "bright kitchen with stone bench tops and gas cooking",
                "kitchen with stone bench tops and gas cooking",
            ),
            ("two bedrooms", "two spacious bedrooms with built in robes"),
            (
                "ducted heating , split system cooling",
                "ducted heating and split system cooling",
            ),
        ]),
        CorpusBleu(vec![("a b c d e f g h", "a b c d x f g h")]),
        SentenceBleu("the cat sat", "the cat sat on the mat"),
        SentenceBleu("a b c d e", "a b c d e"),
        SentenceBleu("a b x d e", "a b c d e"),
        SentenceBleu("zebra", "the cat sat"),
        RougeL("a b c d", "a c b d"),
        RougeL("the cat sat", "the cat sat"),
        RougeL("one two three", "four five six"),
        RougeL("a b a b a b", "b a b a"),
        RougeL("police killed the gunman", "the gunman police killed"),
        RougeL("x a y b z c w d", "a b c d"),
        RougeL(
            "timber deck with outdoor kitchen and pizza oven",
            "pizza oven , timber deck and outdoor kitchen",
        ),
        Meteor("the cat sat", "the cat sat", 3, 1),
        Meteor("cat", "cat", 1, 1),
        Meteor("apple banana", "cherry date", 0, 0),
        Meteor("a b c d", "c d a b", 4, 2),
        Meteor("large timber deck", "timber deck large", 3, 2),
        Meteor("gardens with trees", "garden with tree", 3, 1),
        Meteor("a b c d e f", "a b x d e y", 4, 2),
        Meteor("sunny north facing courtyard", "north facing courtyard", 3, 1),
    ]
}
