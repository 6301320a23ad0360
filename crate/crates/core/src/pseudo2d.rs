//! Sigmoid-confidence pseudo-labels for image elements.

use std::collections::HashSet;

use ndarray::ArrayView2;

use crate::analytic::argmax;
use crate::error::{Error, Result};
use crate::labels::{ClassId, LabelRule, RawLabel};
use crate::scalar::Scalar;

/// Per-element uncertainty in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyScores<T> {
    pub values: Vec<T>,
}

/// Which classes count as "current" and how confident a prediction must be.
#[derive(Debug, Clone)]
pub struct RelabelParams<'a> {
    /// Classes introduced at this step.
    pub current: &'a [ClassId],
    pub background: ClassId,
    pub tau: f64,
}

/// `U_i = 1 − σ(max_c logit_ic)`, evaluated as `σ(−max)` to keep precision
/// near saturation.
pub fn uncertainty_2d<T: Scalar>(prev_logits: ArrayView2<T>) -> Result<UncertaintyScores<T>> {
    if prev_logits.ncols() == 0 {
        return Err(Error::shape("previous model has no classes"));
    }
    let values = prev_logits
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let mut best = T::neg_infinity();
            for &v in row {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("previous logits, row {i}")));
                }
                best = best.max(v);
            }
            Ok(T::one() / (T::one() + best.exp()))
        })
        .collect::<Result<_>>()?;
    Ok(UncertaintyScores { values })
}

/// Mixed labels for one step.
///
/// * ground truth in the current class set: kept;
/// * background with `U > tau`: stays background;
/// * background with `U ≤ tau`: replaced by the previous model's arg-max,
///   which may itself be the background column;
/// * ignored: stays ignored.
pub fn relabel_2d<T: Scalar>(
    gt_labels: &[RawLabel],
    prev_logits: ArrayView2<T>,
    prev_classes: &[ClassId],
    params: &RelabelParams<'_>,
) -> Result<Vec<LabelRule>> {
    if prev_logits.nrows() != gt_labels.len() {
        return Err(Error::shape(format!(
            "{} labels but {} logit rows",
            gt_labels.len(),
            prev_logits.nrows()
        )));
    }
    if prev_logits.ncols() != prev_classes.len() {
        return Err(Error::shape(format!(
            "{} logit columns for {} previous classes",
            prev_logits.ncols(),
            prev_classes.len()
        )));
    }
    let scores = uncertainty_2d(prev_logits)?;
    let current: HashSet<ClassId> = params.current.iter().copied().collect();
    let tau = T::of(params.tau);
    gt_labels
        .iter()
        .zip(prev_logits.rows())
        .zip(&scores.values)
        .enumerate()
        .map(|(i, ((gt, row), &u))| match gt {
            None => Ok(LabelRule::Ignore),
            Some(c) if current.contains(c) => Ok(LabelRule::Keep(*c)),
            Some(c) if *c == params.background => {
                if u > tau {
                    Ok(LabelRule::Background)
                } else {
                    Ok(LabelRule::Pseudo(prev_classes[argmax(row.iter().copied())]))
                }
            }
            Some(c) => Err(Error::data(format!(
                "element {i} has label {c}, which is neither background nor a current class"
            ))),
        })
        .collect()
}
