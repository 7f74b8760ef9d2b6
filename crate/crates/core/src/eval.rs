//! Precision, recall and F-score per class.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::raster_io::RasterGrid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Indexed by class (0 dry, 1 wet).
    pub per_class: [ClassMetrics; 2],
    /// Unweighted mean of the two F-scores.
    pub average_f: f64,
    /// `confusion[truth][pred]`.
    pub confusion: [[u64; 2]; 2],
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

impl MetricsReport {
    pub fn from_confusion(confusion: [[u64; 2]; 2]) -> Result<Self> {
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Validation("no cells to evaluate".into()));
        }
        let per_class = [0, 1].map(|c| {
            let tp = confusion[c][c];
            let predicted = confusion[0][c] + confusion[1][c];
            let actual = confusion[c][0] + confusion[c][1];
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            ClassMetrics {
                precision,
                recall,
                f_score: harmonic(precision, recall),
            }
        });
        Ok(Self {
            average_f: 0.5 * (per_class[0].f_score + per_class[1].f_score),
            per_class,
            confusion,
        })
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<8}{:>10}{:>10}{:>10}", "class", "precision", "recall", "F");
        for (c, m) in self.per_class.iter().enumerate() {
            let name = if c == 0 { "dry" } else { "flood" };
            let _ = writeln!(out, "{:<8}{:>10.4}{:>10.4}{:>10.4}", name, m.precision, m.recall, m.f_score);
        }
        let _ = writeln!(out, "{:<8}{:>30.4}", "avg F", self.average_f);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f_score\n");
        for (c, m) in self.per_class.iter().enumerate() {
            let _ = writeln!(out, "{c},{},{},{}", m.precision, m.recall, m.f_score);
        }
        let _ = writeln!(out, "average,,,{}", self.average_f);
        out
    }

    /// Reads back the average F-score from [`to_csv`](Self::to_csv) output.
    pub fn parse_average_f(csv: &str) -> Result<f64> {
        csv.lines()
            .find_map(|l| l.strip_prefix("average,,,"))
            .ok_or_else(|| Error::Parse("metrics CSV has no average row".into()))?
            .trim()
            .parse()
            .map_err(|_| Error::Parse("average F is not a number".into()))
    }
}

/// Metrics of predicted labels against truth labels; `None` truth cells are
/// skipped.
pub fn score_labels(pred: &[u8], truth: &[Option<u8>]) -> Result<MetricsReport> {
    if pred.len() != truth.len() {
        return Err(Error::Alignment(format!(
            "{} predictions for {} truth cells",
            pred.len(),
            truth.len()
        )));
    }
    let mut confusion = [[0u64; 2]; 2];
    for (&p, t) in pred.iter().zip(truth) {
        if let Some(t) = t {
            if p > 1 {
                return Err(Error::Validation(format!("predicted class {p}")));
            }
            confusion[*t as usize][p as usize] += 1;
        }
    }
    MetricsReport::from_confusion(confusion)
}

/// Metrics of a predicted class grid against a truth grid; truth nodata
/// cells are excluded.
pub fn score(pred: &RasterGrid, truth: &RasterGrid) -> Result<MetricsReport> {
    if !pred.same_shape(truth) {
        return Err(Error::Alignment("prediction and truth grids differ in shape".into()));
    }
    let truth_labels: Vec<Option<u8>> = (0..truth.len()).map(|n| truth.class_at(n)).collect();
    let mut labels = Vec::with_capacity(pred.len());
    for n in 0..pred.len() {
        match pred.class_at(n) {
            Some(c) => labels.push(c),
            None if truth_labels[n].is_none() => labels.push(0),
            None => {
                return Err(Error::Validation(format!("prediction has no class at cell {n}")));
            }
        }
    }
    score_labels(&labels, &truth_labels)
}
