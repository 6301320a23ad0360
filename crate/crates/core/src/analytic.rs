//! Closed-form ridge classifier and its recursive update.
//!
//! The learner keeps two matrices: the classifier `phi` (`d_E × C`) and the
//! inverted auto-correlation `psi = (EᵀE + γI)⁻¹` over every row absorbed so
//! far. A new step with features `E_t` and one-hot labels `Y_t` is absorbed
//! with
//!
//! ```text
//! psi_t = (psi⁻¹ + E_tᵀ E_t)⁻¹
//! phi_t = phi + psi_t E_tᵀ (Y_t − E_t phi)
//! ```
//!
//! Columns for classes introduced at step `t` are appended to `phi` as zeros
//! first, so on those columns the second line reduces to `psi_t E_tᵀ Ỹ_t`.
//! The result equals the batch ridge solution over all absorbed rows.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{column_lookup, ClassId, LabelMatrix};
use crate::linalg::{ensure_finite, symmetrize, Cholesky};
use crate::scalar::Scalar;

/// How `psi` is refreshed during an update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    /// Re-invert `psi⁻¹ + EᵀE` through two Cholesky factorizations (`O(d_E³)`).
    Direct,
    /// Woodbury form; factors only an `N_t × N_t` system.
    Woodbury,
    /// Woodbury when the step has fewer rows than `d_E`, direct otherwise.
    #[default]
    Auto,
}

impl UpdateMode {
    pub fn resolve(self, n_rows: usize, d_expanded: usize) -> UpdateMode {
        match self {
            UpdateMode::Auto if n_rows < d_expanded => UpdateMode::Woodbury,
            UpdateMode::Auto => UpdateMode::Direct,
            other => other,
        }
    }
}

impl std::str::FromStr for UpdateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(UpdateMode::Direct),
            "woodbury" => Ok(UpdateMode::Woodbury),
            "auto" => Ok(UpdateMode::Auto),
            other => Err(Error::config(format!("unknown update mode {other:?}"))),
        }
    }
}

/// Classifier weights plus the inverted auto-correlation of every absorbed row.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticState<T> {
    phi: Array2<T>,
    psi: Array2<T>,
    gamma: f64,
    class_ids: Vec<ClassId>,
    step_index: u64,
}

/// Output of [`AnalyticState::predict`].
#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub logits: Array2<T>,
    /// Winning column per row; ties go to the lowest column.
    pub columns: Vec<usize>,
    pub labels: Vec<ClassId>,
}

impl<T: Scalar> AnalyticState<T> {
    /// Batch ridge solution `phi = (EᵀE + γI)⁻¹ EᵀY`, `psi = (EᵀE + γI)⁻¹`.
    ///
    /// Ignored rows are dropped before any arithmetic.
    pub fn fit_initial(features: ArrayView2<T>, labels: &LabelMatrix, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be positive, got {gamma}")));
        }
        check_rows(features, labels)?;
        column_lookup(labels.class_ids())?;
        let kept = labels.kept_rows();
        if kept.is_empty() {
            return Err(Error::data("initial fit has no labeled rows"));
        }
        let e = features.select(Axis(0), &kept);
        ensure_finite(e.view(), "features")?;
        let y = labels.dense_kept::<T>();

        let mut a = e.t().dot(&e);
        let g = T::of(gamma);
        for i in 0..a.nrows() {
            a[[i, i]] += g;
        }
        let chol = Cholesky::factor(a.view())?;
        let phi = chol.solve(e.t().dot(&y).view())?;
        let psi = chol.inverse();
        ensure_finite(phi.view(), "phi")?;
        ensure_finite(psi.view(), "psi")?;
        Ok(Self {
            phi,
            psi,
            gamma,
            class_ids: labels.class_ids().to_vec(),
            step_index: 1,
        })
    }

    /// Reassembles a state, e.g. from a checkpoint.
    pub fn from_parts(
        phi: Array2<T>,
        psi: Array2<T>,
        gamma: f64,
        class_ids: Vec<ClassId>,
        step_index: u64,
    ) -> Result<Self> {
        let d = psi.nrows();
        if psi.ncols() != d || phi.nrows() != d {
            return Err(Error::shape(format!(
                "phi is {:?} and psi is {:?}; both need d_E rows and psi must be square",
                phi.dim(),
                psi.dim()
            )));
        }
        if phi.ncols() != class_ids.len() {
            return Err(Error::shape(format!(
                "phi has {} columns for {} class ids",
                phi.ncols(),
                class_ids.len()
            )));
        }
        if !(gamma > 0.0) {
            return Err(Error::config(format!("gamma must be positive, got {gamma}")));
        }
        column_lookup(&class_ids)?;
        Ok(Self {
            phi,
            psi,
            gamma,
            class_ids,
            step_index,
        })
    }

    pub fn phi(&self) -> ArrayView2<'_, T> {
        self.phi.view()
    }

    pub fn psi(&self) -> ArrayView2<'_, T> {
        self.psi.view()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub(crate) fn set_step_index(&mut self, step: u64) {
        self.step_index = step;
    }

    pub fn d_expanded(&self) -> usize {
        self.psi.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }

    /// Appends zero classifier columns for classes seen for the first time.
    pub fn expand_classes(&mut self, new_class_ids: &[ClassId]) -> Result<()> {
        if new_class_ids.is_empty() {
            return Ok(());
        }
        let mut all = self.class_ids.clone();
        all.extend_from_slice(new_class_ids);
        column_lookup(&all)?;
        let mut phi = Array2::zeros((self.d_expanded(), all.len()));
        phi.slice_mut(ndarray::s![.., ..self.phi.ncols()]).assign(&self.phi);
        self.phi = phi;
        self.class_ids = all;
        Ok(())
    }

    /// Absorbs one step (or one chunk of a step). On error the state is untouched.
    pub fn crls_update(
        &mut self,
        features: ArrayView2<T>,
        labels: &LabelMatrix,
        mode: UpdateMode,
    ) -> Result<()> {
        check_rows(features, labels)?;
        if features.ncols() != self.d_expanded() {
            return Err(Error::shape(format!(
                "features have {} columns, classifier expects d_E = {}",
                features.ncols(),
                self.d_expanded()
            )));
        }
        if labels.class_ids() != self.class_ids.as_slice() {
            return Err(Error::data(format!(
                "label columns {:?} do not match classifier columns {:?}; expand classes first",
                labels.class_ids(),
                self.class_ids
            )));
        }
        let kept = labels.kept_rows();
        if kept.is_empty() {
            self.step_index += 1;
            return Ok(());
        }
        let e = features.select(Axis(0), &kept);
        ensure_finite(e.view(), "features")?;
        let y = labels.dense_kept::<T>();

        let psi = match mode.resolve(e.nrows(), self.d_expanded()) {
            UpdateMode::Woodbury => self.woodbury_psi(e.view())?,
            _ => self.direct_psi(e.view())?,
        };
        // psi_t Eᵀ, stored transposed (psi_t is exactly symmetric).
        let gain = e.dot(&psi);
        let residual = y - e.dot(&self.phi);
        let phi = &self.phi + &gain.t().dot(&residual);

        ensure_finite(psi.view(), "psi")?;
        ensure_finite(phi.view(), "phi")?;
        self.psi = psi;
        self.phi = phi;
        self.step_index += 1;
        Ok(())
    }

    fn direct_psi(&self, e: ArrayView2<T>) -> Result<Array2<T>> {
        let mut a = Cholesky::factor(self.psi.view())?.inverse();
        a += &e.t().dot(&e);
        Ok(Cholesky::factor(a.view())?.inverse())
    }

    fn woodbury_psi(&self, e: ArrayView2<T>) -> Result<Array2<T>> {
        let b = e.dot(&self.psi);
        let mut s = b.dot(&e.t());
        for i in 0..s.nrows() {
            s[[i, i]] += T::one();
        }
        symmetrize(&mut s);
        let x = Cholesky::factor(s.view())?.solve(b.view())?;
        let mut psi = &self.psi - &b.t().dot(&x);
        symmetrize(&mut psi);
        Ok(psi)
    }

    /// `logits = E phi` with the arg-max class per row.
    pub fn predict(&self, features: ArrayView2<T>) -> Result<Prediction<T>> {
        if features.ncols() != self.d_expanded() {
            return Err(Error::shape(format!(
                "features have {} columns, classifier expects d_E = {}",
                features.ncols(),
                self.d_expanded()
            )));
        }
        let logits = features.dot(&self.phi);
        let columns: Vec<usize> = logits.rows().into_iter().map(|r| argmax(r.iter().copied())).collect();
        let labels = columns.iter().map(|&c| self.class_ids[c]).collect();
        Ok(Prediction {
            logits,
            columns,
            labels,
        })
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<T: PartialOrd>(values: impl IntoIterator<Item = T>) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match &best {
            Some((_, b)) if !(v > *b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i).unwrap_or(0)
}

fn check_rows<T>(features: ArrayView2<T>, labels: &LabelMatrix) -> Result<()> {
    if features.nrows() != labels.n_rows() {
        return Err(Error::shape(format!(
            "{} feature rows but {} labels",
            features.nrows(),
            labels.n_rows()
        )));
    }
    Ok(())
}
