//! Confusion matrices and macro/micro precision, recall and F1.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::RelationLabel;

pub const NUM_CLASSES: usize = 3;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(truth: &[RelationLabel], pred: &[RelationLabel]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels against {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut cm = Self::new();
        for (&t, &p) in truth.iter().zip(pred) {
            cm.add(t, p);
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: RelationLabel, pred: RelationLabel) {
        self.counts[truth.index()][pred.index()] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, o) in self.counts.iter_mut().zip(&other.counts) {
            for (c, v) in row.iter_mut().zip(o) {
                *c += v;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.counts[class][class]
    }

    pub fn false_positives(&self, class: usize) -> u64 {
        (0..NUM_CLASSES).filter(|&t| t != class).map(|t| self.counts[t][class]).sum()
    }

    pub fn false_negatives(&self, class: usize) -> u64 {
        (0..NUM_CLASSES).filter(|&p| p != class).map(|p| self.counts[class][p]).sum()
    }

    /// Number of pairs whose true class is `class`.
    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum();
        ratio(correct, self.total())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

pub fn class_metrics(cm: &ConfusionMatrix, class: usize) -> ClassMetrics {
    let tp = cm.true_positives(class);
    let precision = ratio(tp, tp + cm.false_positives(class));
    let recall = ratio(tp, tp + cm.false_negatives(class));
    ClassMetrics {
        precision,
        recall,
        f1: f1(precision, recall),
        support: cm.support(class),
    }
}

/// Unweighted means of the per-class scores; macro F1 averages the per-class
/// F1 values rather than combining macro precision and recall.
pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<Prf> {
    if cm.total() == 0 {
        return Err(Error::EmptyConfusion);
    }
    let per: Vec<ClassMetrics> = (0..NUM_CLASSES).map(|c| class_metrics(cm, c)).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per.iter().map(f).sum::<f64>() / NUM_CLASSES as f64;
    Ok(Prf {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
    })
}

/// Scores from true positives, false positives and false negatives pooled
/// over all classes.
pub fn micro_metrics(cm: &ConfusionMatrix) -> Result<Prf> {
    if cm.total() == 0 {
        return Err(Error::EmptyConfusion);
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for c in 0..NUM_CLASSES {
        tp += cm.true_positives(c);
        fp += cm.false_positives(c);
        fn_ += cm.false_negatives(c);
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(Prf {
        precision,
        recall,
        f1: f1(precision, recall),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
    #[serde(rename = "micro")]
    pub micro_avg: Prf,
    pub pair_counts: [u64; NUM_CLASSES],
}

impl MetricsReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            per_class: (0..NUM_CLASSES).map(|c| class_metrics(&cm, c)).collect(),
            macro_avg: macro_metrics(&cm)?,
            micro_avg: micro_metrics(&cm)?,
            pair_counts: [cm.support(0), cm.support(1), cm.support(2)],
            confusion: cm,
        })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>9} {:>9} {:>9} {:>9}", "class", "precision", "recall", "f1", "pairs")?;
        for (label, m) in RelationLabel::ALL.iter().zip(&self.per_class) {
            writeln!(
                f,
                "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>9}",
                label.to_string(),
                m.precision,
                m.recall,
                m.f1,
                m.support
            )?;
        }
        for (name, m) in [("macro", self.macro_avg), ("micro", self.micro_avg)] {
            writeln!(f, "{:<12} {:>9.4} {:>9.4} {:>9.4}", name, m.precision, m.recall, m.f1)?;
        }
        Ok(())
    }
}
