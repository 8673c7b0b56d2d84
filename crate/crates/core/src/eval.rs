//! Token-level precision/recall/F1, macro averages and confusion matrices.

use std::fmt::Write as _;

use crate::corpus::{bio_violations, Label};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LabelScores {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// One entry per label of the full label set, in index order.
    pub labels: Vec<LabelScores>,
    /// Indices that entered the macro average.
    pub macro_labels: Vec<usize>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Rows are gold labels, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    pub normalized: Vec<Vec<f64>>,
    pub bio_violations: usize,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    ratio(2.0 * precision * recall, precision + recall)
}

/// Each row divided by its sum; empty rows stay zero.
pub fn normalize_confusion(matrix: &[Vec<u64>]) -> Vec<Vec<f64>> {
    matrix
        .iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            row.iter().map(|&c| ratio(c as f64, total as f64)).collect()
        })
        .collect()
}

/// Builds the report from an existing confusion matrix. The macro average
/// runs over `eval_labels` that have non-zero gold support.
pub fn report_from_confusion(
    confusion: Vec<Vec<u64>>,
    names: &[String],
    eval_labels: &[usize],
) -> Result<EvalReport> {
    let k = names.len();
    if confusion.len() != k || confusion.iter().any(|r| r.len() != k) {
        return Err(Error::Shape(format!(
            "confusion matrix is not {k} x {k}"
        )));
    }
    if let Some(bad) = eval_labels.iter().find(|&&l| l >= k) {
        return Err(Error::Shape(format!("evaluation label {bad} out of range")));
    }
    let labels: Vec<LabelScores> = (0..k)
        .map(|l| {
            let tp = confusion[l][l] as f64;
            let support: u64 = confusion[l].iter().sum();
            let predicted: u64 = confusion.iter().map(|r| r[l]).sum();
            let precision = ratio(tp, predicted as f64);
            let recall = ratio(tp, support as f64);
            LabelScores {
                name: names[l].clone(),
                precision,
                recall,
                f1: f1_score(precision, recall),
                support,
            }
        })
        .collect();
    let macro_labels: Vec<usize> = eval_labels
        .iter()
        .copied()
        .filter(|&l| labels[l].support > 0)
        .collect();
    let mean = |f: fn(&LabelScores) -> f64| {
        ratio(
            macro_labels.iter().map(|&l| f(&labels[l])).sum(),
            macro_labels.len() as f64,
        )
    };
    Ok(EvalReport {
        macro_precision: mean(|s| s.precision),
        macro_recall: mean(|s| s.recall),
        macro_f1: mean(|s| s.f1),
        labels,
        macro_labels,
        normalized: normalize_confusion(&confusion),
        confusion,
        bio_violations: 0,
    })
}

/// Token-level scores over label indices `0..names.len()`.
pub fn compute_metrics(
    gold: &[Vec<usize>],
    pred: &[Vec<usize>],
    names: &[String],
    eval_labels: &[usize],
) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(Error::Mismatch(format!(
            "{} gold sentences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let k = names.len();
    let mut confusion = vec![vec![0u64; k]; k];
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Mismatch(format!(
                "sentence {i}: {} gold tokens but {} predicted",
                g.len(),
                p.len()
            )));
        }
        for (&a, &b) in g.iter().zip(p) {
            if a >= k || b >= k {
                return Err(Error::Shape(format!(
                    "sentence {i}: label index out of range for {k} labels"
                )));
            }
            confusion[a][b] += 1;
        }
    }
    report_from_confusion(confusion, names, eval_labels)
}

/// BIO tag scoring: all thirteen labels in the matrix, macro over the
/// non-O labels, BIO violations counted on the predictions.
pub fn tag_metrics(gold: &[Vec<Label>], pred: &[Vec<Label>]) -> Result<EvalReport> {
    let names: Vec<String> = Label::all().iter().map(Label::to_string).collect();
    let to_idx = |s: &[Vec<Label>]| -> Vec<Vec<usize>> {
        s.iter().map(|v| v.iter().map(|l| l.index()).collect()).collect()
    };
    let eval: Vec<usize> = (1..Label::COUNT).collect();
    let mut report = compute_metrics(&to_idx(gold), &to_idx(pred), &names, &eval)?;
    report.bio_violations = pred.iter().map(|p| bio_violations(p)).sum();
    Ok(report)
}

/// Binary sentence scores; label 0 is negative, 1 positive, and the macro
/// runs over both classes.
pub fn sentence_metrics(gold: &[bool], pred: &[bool]) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(Error::Mismatch(format!(
            "{} gold sentences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut confusion = vec![vec![0u64; 2]; 2];
    for (&g, &p) in gold.iter().zip(pred) {
        confusion[g as usize][p as usize] += 1;
    }
    let names = ["negative".to_string(), "positive".to_string()];
    report_from_confusion(confusion, &names, &[0, 1])
}

impl EvalReport {
    pub fn label(&self, name: &str) -> Option<&LabelScores> {
        self.labels.iter().find(|s| s.name == name)
    }

    pub fn accuracy(&self) -> f64 {
        let total: u64 = self.confusion.iter().flatten().sum();
        let correct: u64 = (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum();
        ratio(correct as f64, total as f64)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("label\tprecision\trecall\tf1\tsupport\n");
        for s in &self.labels {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{}",
                s.name, s.precision, s.recall, s.f1, s.support
            );
        }
        let support: u64 = self.macro_labels.iter().map(|&l| self.labels[l].support).sum();
        let _ = writeln!(
            out,
            "macro\t{:.6}\t{:.6}\t{:.6}\t{}",
            self.macro_precision, self.macro_recall, self.macro_f1, support
        );
        out
    }

    pub fn to_text(&self) -> String {
        let width = self
            .labels
            .iter()
            .map(|s| s.name.len())
            .max()
            .unwrap_or(0)
            .max("macro".len());
        let mut out = format!(
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>8}\n",
            "label", "precision", "recall", "f1", "support"
        );
        let mut row = |name: &str, p: f64, r: f64, f: f64, n: u64| {
            let _ = writeln!(out, "{name:<width$}  {p:>9.4}  {r:>9.4}  {f:>9.4}  {n:>8}");
        };
        for s in &self.labels {
            row(&s.name, s.precision, s.recall, s.f1, s.support);
        }
        let support = self.macro_labels.iter().map(|&l| self.labels[l].support).sum();
        row("macro", self.macro_precision, self.macro_recall, self.macro_f1, support);
        let _ = writeln!(out, "accuracy {:.4}", self.accuracy());
        let _ = writeln!(out, "bio violations {}", self.bio_violations);
        out
    }

    fn matrix_tsv<T: std::fmt::Display>(&self, rows: &[Vec<T>]) -> String {
        let mut out = String::from("gold\\pred");
        for s in &self.labels {
            out.push('\t');
            out.push_str(&s.name);
        }
        out.push('\n');
        for (s, row) in self.labels.iter().zip(rows) {
            out.push_str(&s.name);
            for v in row {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn confusion_tsv(&self) -> String {
        self.matrix_tsv(&self.confusion)
    }

    pub fn normalized_confusion_tsv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .normalized
            .iter()
            .map(|r| r.iter().map(|v| format!("{v:.6}")).collect())
            .collect();
        self.matrix_tsv(&rows)
    }
}
