//! Result tables: one row per (backbone, variant), best cell per column
//! and backbone in bold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{round2, MetricName};
use crate::model::TextVariant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub backbone: String,
    pub variant: TextVariant,
    /// `None` renders as "n/a".
    pub values: BTreeMap<MetricName, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus: String,
    pub seed: u64,
    pub backends: BTreeMap<String, String>,
    pub columns: Vec<MetricName>,
    pub rows: Vec<ReportRow>,
}

/// "baseline" for the unedited draft, the variant name otherwise.
pub fn variant_label(v: TextVariant) -> &'static str {
    match v {
        TextVariant::Draft => "baseline",
        other => other.as_str(),
    }
}

fn variant_rank(v: TextVariant) -> u8 {
    match v {
        TextVariant::Draft => 0,
        TextVariant::Pruned => 1,
        TextVariant::Appended => 2,
        TextVariant::Combined => 3,
    }
}

fn cell(v: f64) -> String {
    format!("{v:.2}")
}

impl EvalReport {
    pub fn new(corpus: impl Into<String>, seed: u64, columns: Vec<MetricName>) -> Self {
        Self {
            corpus: corpus.into(),
            seed,
            backends: BTreeMap::new(),
            columns,
            rows: Vec::new(),
        }
    }

    /// Missing metrics are stored as n/a so every row has every column.
    pub fn push(
        &mut self,
        backbone: impl Into<String>,
        variant: TextVariant,
        values: BTreeMap<MetricName, Option<f64>>,
    ) {
        let values = self
            .columns
            .iter()
            .map(|m| (*m, values.get(m).copied().flatten()))
            .collect();
        self.rows.push(ReportRow {
            backbone: backbone.into(),
            variant,
            values,
        });
        self.sort();
    }

    /// Backbones keep first-appearance order; variants go baseline,
    /// pruned, appended, combined.
    fn sort(&mut self) {
        let mut order: Vec<String> = Vec::new();
        for r in &self.rows {
            if !order.contains(&r.backbone) {
                order.push(r.backbone.clone());
            }
        }
        self.rows.sort_by_key(|r| {
            (
                order.iter().position(|b| *b == r.backbone).unwrap(),
                variant_rank(r.variant),
            )
        });
    }

    /// `bold[row][col]`: the cell holds the (possibly tied) maximum of its
    /// column within its backbone group. Ties compare at display precision.
    pub fn bold(&self) -> Vec<Vec<bool>> {
        let mut best: BTreeMap<(&str, MetricName), f64> = BTreeMap::new();
        for r in &self.rows {
            for m in &self.columns {
                if let Some(Some(v)) = r.values.get(m) {
                    let e = best.entry((r.backbone.as_str(), *m)).or_insert(f64::NEG_INFINITY);
                    *e = e.max(round2(*v));
                }
            }
        }
        self.rows
            .iter()
            .map(|r| {
                self.columns
                    .iter()
                    .map(|m| match r.values.get(m) {
                        Some(Some(v)) => best.get(&(r.backbone.as_str(), *m)) == Some(&round2(*v)),
                        _ => false,
                    })
                    .collect()
            })
            .collect()
    }

    /// Aligned plain-text table; bold cells are wrapped in `**`.
    pub fn render_table(&self) -> String {
        let bold = self.bold();
        let mut grid: Vec<Vec<String>> = vec![];
        let mut header = vec!["Model".to_owned(), "Variant".to_owned()];
        header.extend(self.columns.iter().map(|m| m.header().to_owned()));
        grid.push(header);
        for (r, b) in self.rows.iter().zip(&bold) {
            let mut line = vec![r.backbone.clone(), variant_label(r.variant).to_owned()];
            for (m, is_bold) in self.columns.iter().zip(b) {
                line.push(match r.values.get(m) {
                    Some(Some(v)) if *is_bold => format!("**{}**", cell(*v)),
                    Some(Some(v)) => cell(*v),
                    _ => "n/a".to_owned(),
                });
            }
            grid.push(line);
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|c| grid.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in grid.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    if c < 2 {
                        format!("{s:<w$}", w = widths[c])
                    } else {
                        format!("{s:>w$}", w = widths[c])
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                out.push_str(&rule.join("  "));
                out.push('\n');
            }
        }
        out
    }

    /// Machine-readable rows grouped by variant label, for
    /// `<corpus>.<variant>.report` files.
    pub fn row_lines(&self) -> BTreeMap<&'static str, Vec<Value>> {
        let bold = self.bold();
        let mut out: BTreeMap<&'static str, Vec<Value>> = BTreeMap::new();
        for (r, b) in self.rows.iter().zip(&bold) {
            let metrics: serde_json::Map<String, Value> = self
                .columns
                .iter()
                .map(|m| {
                    let v = match r.values.get(m) {
                        Some(Some(v)) => json!(v),
                        _ => json!("n/a"),
                    };
                    (m.as_str().to_owned(), v)
                })
                .collect();
            let bolded: Vec<&str> = self
                .columns
                .iter()
                .zip(b)
                .filter(|(_, x)| **x)
                .map(|(m, _)| m.as_str())
                .collect();
            out.entry(variant_label(r.variant)).or_default().push(json!({
                "corpus": self.corpus,
                "seed": self.seed,
                "backbone": r.backbone,
                "variant": variant_label(r.variant),
                "metrics": metrics,
                "bold": bolded,
                "backends": self.backends,
            }));
        }
        out
    }

    pub fn file_name(&self, variant_label: &str) -> String {
        format!("{}.{}.report", self.corpus, variant_label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vals(pairs: &[(MetricName, Option<f64>)]) -> BTreeMap<MetricName, Option<f64>> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn rows_are_ordered_and_ties_bold() {
        let mut r = EvalReport::new("house", 1, vec![MetricName::Bleu, MetricName::ClipScore]);
        r.push(
            "gpt",
            TextVariant::Combined,
            vals(&[(MetricName::Bleu, Some(10.0)), (MetricName::ClipScore, None)]),
        );
        r.push(
            "gpt",
            TextVariant::Draft,
            vals(&[(MetricName::Bleu, Some(10.0)), (MetricName::ClipScore, Some(1.0))]),
        );
        r.push(
            "gpt",
            TextVariant::Pruned,
            vals(&[(MetricName::Bleu, Some(9.0)), (MetricName::ClipScore, Some(0.5))]),
        );
        let order: Vec<_> = r.rows.iter().map(|x| x.variant).collect();
        assert_eq!(order, [TextVariant::Draft, TextVariant::Pruned, TextVariant::Combined]);
        assert_eq!(r.bold(), vec![vec![true, true], vec![false, false], vec![true, false]]);
        let table = r.render_table();
        assert!(table.contains("n/a"));
        assert!(table.lines().nth(2).unwrap().starts_with("gpt    baseline"));
    }

    #[test]
    fn groups_bold_independently() {
        let mut r = EvalReport::new("c", 0, vec![MetricName::Bleu]);
        r.push("a", TextVariant::Draft, vals(&[(MetricName::Bleu, Some(1.0))]));
        r.push("b", TextVariant::Draft, vals(&[(MetricName::Bleu, Some(2.0))]));
        assert_eq!(r.bold(), vec![vec![true], vec![true]]);
        assert_eq!(r.row_lines()["baseline"].len(), 2);
        assert_eq!(r.file_name("baseline"), "c.baseline.report");
    }
}
