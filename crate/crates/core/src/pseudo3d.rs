//! Neighborhood-aggregated BALD uncertainty and pseudo-labels for point clouds.

use std::collections::HashSet;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::analytic::argmax;
use crate::error::{Error, Result};
use crate::labels::{ClassId, LabelRule, RawLabel};
use crate::pseudo2d::{RelabelParams, UncertaintyScores};
use crate::scalar::Scalar;

/// Lower clamp for cosine weights.
pub const WEIGHT_FLOOR: f64 = 1e-6;
/// Floor applied to every logarithm argument.
pub const LOG_FLOOR: f64 = 1e-12;
/// Allowed deviation of a probability row sum from one.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// The `K` nearest other points of one query, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct PointNeighborhood<T> {
    pub indices: Vec<usize>,
    /// Cosine similarity of the xyz vectors, clamped into `[1e-6, 1]`.
    pub weights: Vec<T>,
    pub distances: Vec<T>,
}

/// Euclidean KNN over xyz rows with cosine weights.
///
/// Brute force, parallel over queries. Equal distances are ordered by index.
pub fn knn_cosine<T: Scalar>(coords: ArrayView2<T>, k: usize) -> Result<Vec<PointNeighborhood<T>>> {
    let n = coords.nrows();
    if coords.ncols() != 3 {
        return Err(Error::shape(format!("coordinates need 3 columns, got {}", coords.ncols())));
    }
    if k == 0 {
        return Err(Error::config("k must be positive"));
    }
    if n <= k {
        return Err(Error::data(format!("need more than k = {k} points, got {n}")));
    }
    crate::linalg::ensure_finite(coords, "coordinates")?;
    let pts: Vec<[T; 3]> = coords.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect();
    let norms: Vec<T> = pts.iter().map(|p| dot3(p, p).sqrt()).collect();
    let floor = T::of(WEIGHT_FLOOR);

    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let q = &pts[i];
            let mut cand: Vec<(T, usize)> = pts
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(j, p)| {
                    let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                    (dot3(&d, &d), j)
                })
                .collect();
            let by_dist = |a: &(T, usize), b: &(T, usize)| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1));
            cand.select_nth_unstable_by(k - 1, by_dist);
            cand.truncate(k);
            cand.sort_by(by_dist);
            let weights = cand
                .iter()
                .map(|&(_, j)| {
                    let denom = norms[i] * norms[j];
                    if denom > T::zero() {
                        let cos = dot3(q, &pts[j]) / denom;
                        cos.max(floor).min(T::one())
                    } else {
                        floor
                    }
                })
                .collect();
            PointNeighborhood {
                indices: cand.iter().map(|c| c.1).collect(),
                weights,
                distances: cand.iter().map(|c| c.0.sqrt()).collect(),
            }
        })
        .collect())
}

#[inline]
fn dot3<T: Scalar>(a: &[T; 3], b: &[T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(logits: ArrayView2<T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// BALD score of every point from its neighbors' class probabilities.
///
/// With `a_kc = q_kc · w_k` and `m_c = (1/K) Σ_k a_kc`,
/// `U = −Σ_c m_c ln m_c + (1/K) Σ_{c,k} a_kc ln a_kc`, every logarithm taking
/// `max(arg, 1e-12)`. Weights are not renormalized.
pub fn bald_uncertainty<T: Scalar>(
    prev_probs: ArrayView2<T>,
    neighborhoods: &[PointNeighborhood<T>],
) -> Result<UncertaintyScores<T>> {
    if neighborhoods.len() != prev_probs.nrows() {
        return Err(Error::shape(format!(
            "{} neighborhoods for {} probability rows",
            neighborhoods.len(),
            prev_probs.nrows()
        )));
    }
    for (i, row) in prev_probs.rows().into_iter().enumerate() {
        let sum = row.iter().map(|v| v.as_f64()).sum::<f64>();
        if row.iter().any(|v| !(v.as_f64() >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::data(format!("probability row {i} is not on the simplex (sum {sum})")));
        }
    }
    let n_classes = prev_probs.ncols();
    let floor = T::of(LOG_FLOOR);
    let xlogx = |x: T| x * x.max(floor).ln();
    let values = neighborhoods
        .par_iter()
        .enumerate()
        .map(|(i, nb)| {
            let k = nb.indices.len();
            if k == 0 || nb.weights.len() != k {
                return Err(Error::data(format!("point {i} has an empty or malformed neighborhood")));
            }
            let kt = T::of(k as f64);
            let mut u = T::zero();
            for c in 0..n_classes {
                let mut mean = T::zero();
                let mut member = T::zero();
                for (&j, &w) in nb.indices.iter().zip(&nb.weights) {
                    let a = prev_probs[[j, c]] * w;
                    mean += a;
                    member += xlogx(a);
                }
                mean /= kt;
                u += member / kt - xlogx(mean);
            }
            Ok(u)
        })
        .collect::<Result<Vec<T>>>()?;
    Ok(UncertaintyScores { values })
}

/// Mixed labels for one point-cloud step.
///
/// * ground truth in the current class set: kept;
/// * background, predicted non-background with `U ≤ tau`: the prediction;
/// * background otherwise: the prediction of the nearest neighbor that is
///   itself non-background with `U ≤ tau`, or background if none qualifies;
/// * ignored: stays ignored.
pub fn relabel_3d<T: Scalar>(
    gt_labels: &[RawLabel],
    prev_probs: ArrayView2<T>,
    prev_classes: &[ClassId],
    neighborhoods: &[PointNeighborhood<T>],
    params: &RelabelParams<'_>,
) -> Result<Vec<LabelRule>> {
    let n = gt_labels.len();
    if prev_probs.nrows() != n || neighborhoods.len() != n {
        return Err(Error::shape(format!(
            "{} labels, {} probability rows, {} neighborhoods",
            n,
            prev_probs.nrows(),
            neighborhoods.len()
        )));
    }
    if prev_probs.ncols() != prev_classes.len() {
        return Err(Error::shape(format!(
            "{} probability columns for {} previous classes",
            prev_probs.ncols(),
            prev_classes.len()
        )));
    }
    let scores = bald_uncertainty(prev_probs, neighborhoods)?;
    let predicted: Vec<ClassId> = prev_probs
        .rows()
        .into_iter()
        .map(|r| prev_classes[argmax(r.iter().copied())])
        .collect();
    let current: HashSet<ClassId> = params.current.iter().copied().collect();
    let tau = T::of(params.tau);
    let bg = params.background;
    let confident = |j: usize| predicted[j] != bg && scores.values[j] <= tau;

    gt_labels
        .iter()
        .enumerate()
        .map(|(i, gt)| match gt {
            None => Ok(LabelRule::Ignore),
            Some(c) if current.contains(c) => Ok(LabelRule::Keep(*c)),
            Some(c) if *c == bg => {
                if confident(i) {
                    Ok(LabelRule::Pseudo(predicted[i]))
                } else {
                    Ok(neighborhoods[i]
                        .indices
                        .iter()
                        .find(|&&j| confident(j))
                        .map(|&j| LabelRule::NeighborPseudo(predicted[j]))
                        .unwrap_or(LabelRule::Background))
                }
            }
            Some(c) => Err(Error::data(format!(
                "point {i} has label {c}, which is neither background nor a current class"
            ))),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn collinear_points_have_unit_weights() {
        let c = array![[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let nb = knn_cosine(c.view(), 2).unwrap();
        for n in &nb {
            assert_eq!(n.weights, vec![1.0, 1.0]);
        }
        assert_eq!(nb[0].indices, vec![1, 2]);
        assert_eq!(nb[1].indices, vec![0, 2]);
        assert_eq!(nb[0].distances, vec![1.0, 2.0]);
    }

    #[test]
    fn opposite_points_clamp_to_floor() {
        let c = array![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        let nb = knn_cosine(c.view(), 1).unwrap();
        assert_eq!(nb[0].weights, vec![WEIGHT_FLOOR]);
    }

    #[test]
    fn zero_norm_point_gets_floor_weight() {
        let c = array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let nb = knn_cosine(c.view(), 1).unwrap();
        assert_eq!(nb[0].weights, vec![WEIGHT_FLOOR]);
        assert_eq!(nb[1].indices, vec![0]);
        assert_eq!(nb[1].weights, vec![WEIGHT_FLOOR]);
    }

    #[test]
    fn too_few_points_rejected() {
        let c = array![[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert!(knn_cosine(c.view(), 2).is_err());
        assert!(knn_cosine(c.view(), 0).is_err());
    }

    fn hood(indices: Vec<usize>, weights: Vec<f64>) -> PointNeighborhood<f64> {
        let d = (0..indices.len()).map(|i| i as f64).collect();
        PointNeighborhood {
            indices,
            weights,
            distances: d,
        }
    }

    #[test]
    fn bald_of_full_disagreement_is_ln2() {
        let q = array![[0.5, 0.5], [1.0, 0.0], [0.0, 1.0]];
        let nb = vec![hood(vec![1, 2], vec![1.0, 1.0]), hood(vec![0, 2], vec![1.0, 1.0]), hood(vec![0, 1], vec![1.0, 1.0])];
        let u = bald_uncertainty(q.view(), &nb).unwrap();
        assert!((u.values[0] - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn bald_of_agreement_is_zero() {
        let d = 1e-12;
        let q = array![[1.0 - 2.0 * d, d, d], [1.0 - 2.0 * d, d, d], [1.0 - 2.0 * d, d, d], [1.0 - 2.0 * d, d, d]];
        let nb: Vec<_> = (0..4)
            .map(|i| hood((0..4).filter(|&j| j != i).collect(), vec![1.0; 3]))
            .collect();
        let u = bald_uncertainty(q.view(), &nb).unwrap();
        assert!(u.values.iter().all(|v| v.abs() < 1e-9), "{:?}", u.values);
    }

    #[test]
    fn bald_rejects_off_simplex_and_empty() {
        let nb = vec![hood(vec![0], vec![1.0])];
        assert!(bald_uncertainty(array![[0.7, 0.7]].view(), &nb).is_err());
        assert!(bald_uncertainty(array![[1.0, 0.0]].view(), &[hood(vec![], vec![])]).is_err());
    }

    #[test]
    fn softmax_is_stable() {
        let p = softmax_rows(array![[1000.0, 1000.0], [0.0, f64::ln(3.0)]].view());
        assert_eq!(p[[0, 0]], 0.5);
        assert!((p[[1, 1]] - 0.75).abs() < 1e-15);
    }
}
