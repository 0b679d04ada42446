#[path = "support/metric_oracle.rs"]
mod metric_oracle;

use visicrit_core::eval::metrics::{chunk_count, meteor, meteor_alignment, rouge_l};
use visicrit_core::text::tokenize;

#[test]
fn library_matches_brute_force_oracles() {
    let cases = metric_oracle::cases();
    assert!(cases.len() >= 20);
    for case in cases {
        let (got, want) = case.evaluate();
        assert!((got - want).abs() <= 1e-9, "{}: {got} vs {want}", case.name());
    }
}

#[test]
fn pinned_values() {
    assert!((rouge_l("a b c d", "a c b d") - 75.0).abs() < 1e-9);
    assert!((meteor("the cat sat", "the cat sat") - 98.15).abs() <= 0.01);
    assert!((meteor("cat", "cat") - 50.0).abs() < 1e-9);
}

#[test]
fn repeated_tokens_align_left_to_right() {
    let c = tokenize("the cat sat on the mat");
    let r = tokenize("on the mat sat the cat");
    let pairs = meteor_alignment(&c, &r);
    assert_eq!(pairs, [(0, 1), (1, 5), (2, 3), (3, 0), (4, 4), (5, 2)]);
    assert_eq!(chunk_count(&pairs), 6);
}
