//! Confusion matrices, per-class IoU and grouped mIoU.
//!
//! A class whose IoU denominator is zero (absent from both ground truth and
//! predictions) has no IoU and is left out of every mean.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::ClassId;

/// Square count matrix, `counts[gt][pred]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    n: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    /// Adds one element per position; `None` ground truth is skipped.
    pub fn accumulate(&mut self, pred: &[usize], gt: &[Option<usize>]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!(
                "{} predictions for {} ground-truth labels",
                pred.len(),
                gt.len()
            )));
        }
        for (i, (&p, g)) in pred.iter().zip(gt).enumerate() {
            let Some(g) = *g else { continue };
            if g >= self.n || p >= self.n {
                return Err(Error::data(format!(
                    "element {i}: class index out of range (gt {g}, pred {p}, n {})",
                    self.n
                )));
            }
            self.counts[g * self.n + p] += 1;
        }
        Ok(())
    }

    /// Element-wise sum; partial matrices from disjoint chunks combine this way.
    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if other.n != self.n {
            return Err(Error::shape("cannot merge confusion matrices of different size"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c * self.n..(c + 1) * self.n].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.n).map(|g| self.get(g, c)).sum()
    }

    /// `TP / (TP + FP + FN)`, `None` when the denominator is zero.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.get(c, c);
        let denom = self.row_sum(c) + self.col_sum(c) - tp;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.n.max(1)).take(self.n).map(|r| r.to_vec()).collect()
    }
}

/// `confusion_accumulate` as a free function.
pub fn confusion_accumulate(pred: &[usize], gt: &[Option<usize>], n_classes: usize) -> Result<Confusion> {
    let mut c = Confusion::zeros(n_classes);
    c.accumulate(pred, gt)?;
    Ok(c)
}

/// Which classes form the "base" and "incremental" groups.
#[derive(Debug, Clone)]
pub struct ClassGroups {
    /// Column order of the confusion matrix.
    pub class_ids: Vec<ClassId>,
    pub base: Vec<ClassId>,
    pub background: ClassId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub per_class_iou: BTreeMap<ClassId, Option<f64>>,
    pub miou_base: Option<f64>,
    pub miou_incremental: Option<f64>,
    pub miou_all: Option<f64>,
    /// `miou_all` with the background class left out.
    pub miou_all_excl_background: Option<f64>,
    pub confusion: Vec<Vec<u64>>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-class IoU and the grouped means.
///
/// `base` holds classes in `groups.base`, `incremental` every other class,
/// and `all` every class including background.
pub fn iou_from_confusion(confusion: &Confusion, groups: &ClassGroups) -> Result<SegMetrics> {
    if groups.class_ids.len() != confusion.n_classes() {
        return Err(Error::shape(format!(
            "{} class ids for a {}x{} confusion matrix",
            groups.class_ids.len(),
            confusion.n_classes(),
            confusion.n_classes()
        )));
    }
    let ious: Vec<(ClassId, Option<f64>)> = groups
        .class_ids
        .iter()
        .enumerate()
        .map(|(j, &c)| (c, confusion.iou(j)))
        .collect();
    let defined = |pred: &dyn Fn(ClassId) -> bool| {
        mean(ious.iter().filter(|(c, _)| pred(*c)).filter_map(|(_, v)| *v))
    };
    Ok(SegMetrics {
        miou_base: defined(&|c| groups.base.contains(&c)),
        miou_incremental: defined(&|c| !groups.base.contains(&c)),
        miou_all: defined(&|_| true),
        miou_all_excl_background: defined(&|c| c != groups.background),
        per_class_iou: ious.into_iter().collect(),
        confusion: confusion.rows(),
    })
}

/// One CSV/JSON row per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub metrics: SegMetrics,
    pub wall_time_s: f64,
}

pub const CSV_HEADER: &str = "step,miou_base,miou_incremental,miou_all,wall_time_s";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.17e}")).unwrap_or_default()
}

pub fn write_csv<W: Write>(mut out: W, rows: &[StepMetrics]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:.6}",
            r.step,
            opt(r.metrics.miou_base),
            opt(r.metrics.miou_incremental),
            opt(r.metrics.miou_all),
            r.wall_time_s
        )?;
    }
    Ok(())
}
