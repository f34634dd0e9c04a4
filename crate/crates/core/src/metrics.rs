//! Confusion matrices and F1 scoring.
//!
//! Per-class scores use a one-vs-rest reduction of the multi-class confusion
//! matrix: for class `m`, `TP` is the diagonal cell, `FP` the rest of column
//! `m` and `FN` the rest of row `m`. Zero denominators score 0.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skb::ClassId;
use crate::PairId;

/// `counts[a][p]` = samples of actual class `a` predicted as class `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self> {
        let m = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != m) {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: bad.len(),
            });
        }
        Ok(ConfusionMatrix {
            num_classes: m,
            counts: rows.into_iter().flatten().collect(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, actual: ClassId, predicted: ClassId) -> u64 {
        self.counts[actual.index() * self.num_classes + predicted.index()]
    }

    pub fn record(&mut self, actual: ClassId, predicted: ClassId) -> Result<()> {
        actual.check(self.num_classes)?;
        predicted.check(self.num_classes)?;
        self.counts[actual.index() * self.num_classes + predicted.index()] += 1;
        Ok(())
    }

    pub fn row(&self, actual: ClassId) -> &[u64] {
        let start = actual.index() * self.num_classes;
        &self.counts[start..start + self.num_classes]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.num_classes.max(1))
            .map(<[u64]>::to_vec)
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes)
            .map(|i| self.counts[i * self.num_classes + i])
            .sum()
    }

    pub fn true_positives(&self, class: ClassId) -> u64 {
        self.get(class, class)
    }

    pub fn false_positives(&self, class: ClassId) -> u64 {
        let col = class.index();
        (0..self.num_classes)
            .filter(|&a| a != col)
            .map(|a| self.counts[a * self.num_classes + col])
            .sum()
    }

    pub fn false_negatives(&self, class: ClassId) -> u64 {
        let tp = self.true_positives(class);
        self.row(class).iter().sum::<u64>() - tp
    }
}

pub fn confusion_from_labels(
    actual: &[ClassId],
    predicted: &[ClassId],
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    if actual.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            actual: actual.len(),
            predicted: predicted.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (&a, &p) in actual.iter().zip(predicted) {
        cm.record(a, p)?;
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn class_f1(cm: &ConfusionMatrix, class: ClassId) -> ClassScore {
    let tp = cm.true_positives(class);
    let precision = ratio(tp, tp + cm.false_positives(class));
    let recall = ratio(tp, tp + cm.false_negatives(class));
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassScore {
        precision,
        recall,
        f1,
    }
}

/// Per-class scores plus their macro average over all classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub per_class: Vec<ClassScore>,
    pub macro_f1: f64,
}

impl ClassScores {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        Self::from_per_class(
            ClassId::all(cm.num_classes())
                .map(|c| class_f1(cm, c))
                .collect(),
        )
    }

    pub fn from_per_class(per_class: Vec<ClassScore>) -> Self {
        let mut scores = ClassScores {
            per_class,
            macro_f1: 0.0,
        };
        scores.macro_f1 = macro_f1(&scores);
        scores
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn get(&self, class: ClassId) -> Option<&ClassScore> {
        self.per_class.get(class.index())
    }

    pub fn f1_values(&self) -> Vec<f64> {
        self.per_class.iter().map(|s| s.f1).collect()
    }
}

/// Mean per-class F1, zero-scoring classes included.
pub fn macro_f1(scores: &ClassScores) -> f64 {
    if scores.per_class.is_empty() {
        return 0.0;
    }
    scores.per_class.iter().map(|s| s.f1).sum::<f64>() / scores.per_class.len() as f64
}

/// Writes `pair,class,precision,recall,f1` rows.
pub fn write_class_scores_csv<W: Write>(writer: W, rows: &[(PairId, &ClassScores)]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["pair", "class", "precision", "recall", "f1"])?;
    for (pair, scores) in rows {
        for (i, s) in scores.per_class.iter().enumerate() {
            csv.write_record([
                pair.to_string(),
                ClassId::from_index(i).to_string(),
                s.precision.to_string(),
                s.recall.to_string(),
                s.f1.to_string(),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}
