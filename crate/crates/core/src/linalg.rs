//! Dense symmetric positive-definite kernels.
//!
//! Factorizations are blocked so that nearly all of the work runs through
//! `general_mat_mul`. For a fixed thread count every routine here is
//! deterministic.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const BLOCK: usize = 64;

/// Lower Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    lower: Array2<T>,
}

impl<T: Scalar> Cholesky<T> {
    /// Factors a symmetric matrix. Only the lower triangle of `a` is read.
    pub fn factor(a: ArrayView2<T>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::shape(format!(
                "cholesky needs a square matrix, got {}x{}",
                n,
                a.ncols()
            )));
        }
        let mut l = a.to_owned();
        let mut k0 = 0;
        while k0 < n {
            let k1 = (k0 + BLOCK).min(n);
            factor_unblocked(l.slice_mut(s![k0..k1, k0..k1]), k0)?;
            if k1 < n {
                let diag = l.slice(s![k0..k1, k0..k1]).to_owned();
                let mut panel = l.slice(s![k1.., k0..k1]).to_owned();
                panel_solve(&diag, &mut panel);
                l.slice_mut(s![k1.., k0..k1]).assign(&panel);
                // Trailing update restricted to the lower block triangle.
                let mut r0 = k1;
                while r0 < n {
                    let r1 = (r0 + BLOCK).min(n);
                    let rows = panel.slice(s![r0 - k1..r1 - k1, ..]);
                    let cols = panel.slice(s![..r1 - k1, ..]);
                    let mut target = l.slice_mut(s![r0..r1, k1..r1]);
                    general_mat_mul(-T::one(), &rows, &cols.t(), T::one(), &mut target);
                    r0 = r1;
                }
            }
            k0 = k1;
        }
        for i in 0..n {
            for j in i + 1..n {
                l[[i, j]] = T::zero();
            }
        }
        Ok(Self { lower: l })
    }

    pub fn lower(&self) -> ArrayView2<'_, T> {
        self.lower.view()
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Solves `A X = B` for every column of `b`.
    pub fn solve(&self, b: ArrayView2<T>) -> Result<Array2<T>> {
        let n = self.dim();
        if b.nrows() != n {
            return Err(Error::shape(format!(
                "right-hand side has {} rows, factor has dimension {}",
                b.nrows(),
                n
            )));
        }
        let mut x = b.to_owned();
        self.forward(&mut x);
        self.backward(&mut x);
        Ok(x)
    }

    /// `A⁻¹`, symmetrized.
    pub fn inverse(&self) -> Array2<T> {
        let mut x = Array2::<T>::eye(self.dim());
        self.forward(&mut x);
        self.backward(&mut x);
        symmetrize(&mut x);
        x
    }

    // L Y = B, in place.
    fn forward(&self, y: &mut Array2<T>) {
        let l = &self.lower;
        let n = l.nrows();
        let mut r0 = 0;
        while r0 < n {
            let r1 = (r0 + BLOCK).min(n);
            if r0 > 0 {
                let (done, mut rest) = y.view_mut().split_at(Axis(0), r0);
                let mut block = rest.slice_mut(s![..r1 - r0, ..]);
                general_mat_mul(
                    -T::one(),
                    &l.slice(s![r0..r1, ..r0]),
                    &done,
                    T::one(),
                    &mut block,
                );
            }
            for i in r0..r1 {
                let (head, mut tail) = y.view_mut().split_at(Axis(0), i);
                let mut row = tail.row_mut(0);
                for k in r0..i {
                    row.scaled_add(-l[[i, k]], &head.row(k));
                }
                let d = l[[i, i]];
                row.mapv_inplace(|v| v / d);
            }
            r0 = r1;
        }
    }

    // Lᵀ X = Y, in place.
    fn backward(&self, x: &mut Array2<T>) {
        let l = &self.lower;
        let n = l.nrows();
        let mut r1 = n;
        while r1 > 0 {
            let r0 = r1.saturating_sub(BLOCK);
            if r1 < n {
                let (mut head, done) = x.view_mut().split_at(Axis(0), r1);
                let mut block = head.slice_mut(s![r0.., ..]);
                general_mat_mul(
                    -T::one(),
                    &l.slice(s![r1.., r0..r1]).t(),
                    &done,
                    T::one(),
                    &mut block,
                );
            }
            for i in (r0..r1).rev() {
                let (mut head, tail) = x.view_mut().split_at(Axis(0), i + 1);
                let mut row = head.row_mut(i);
                for k in i + 1..r1 {
                    row.scaled_add(-l[[k, i]], &tail.row(k - i - 1));
                }
                let d = l[[i, i]];
                row.mapv_inplace(|v| v / d);
            }
            r1 = r0;
        }
    }
}

fn factor_unblocked<T: Scalar>(mut a: ArrayViewMut2<T>, offset: usize) -> Result<()> {
    let n = a.nrows();
    for j in 0..n {
        let mut s = a[[j, j]];
        for k in 0..j {
            s -= a[[j, k]] * a[[j, k]];
        }
        if !(s > T::zero()) {
            return Err(Error::NotPositiveDefinite {
                pivot: offset + j,
                value: s.as_f64(),
            });
        }
        let d = s.sqrt();
        a[[j, j]] = d;
        for i in j + 1..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = v / d;
        }
    }
    Ok(())
}

// X L11ᵀ = P, row by row.
fn panel_solve<T: Scalar>(diag: &Array2<T>, panel: &mut Array2<T>) {
    let b = diag.nrows();
    for mut row in panel.rows_mut() {
        for j in 0..b {
            let mut v = row[j];
            for i in 0..j {
                v -= row[i] * diag[[j, i]];
            }
            row[j] = v / diag[[j, j]];
        }
    }
}

/// `a ← (a + aᵀ) / 2`.
pub fn symmetrize<T: Scalar>(a: &mut Array2<T>) {
    let n = a.nrows();
    let half = T::of(0.5);
    for i in 0..n {
        for j in i + 1..n {
            let v = (a[[i, j]] + a[[j, i]]) * half;
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
}

/// `‖a − b‖_F / ‖b‖_F`, falling back to the absolute distance when `b` is zero.
pub fn rel_frobenius<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "rel_frobenius: shape mismatch");
    let mut diff = 0.0f64;
    let mut norm = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x.as_f64() - y.as_f64();
        diff += d * d;
        norm += y.as_f64() * y.as_f64();
    }
    if norm == 0.0 {
        diff.sqrt()
    } else {
        (diff / norm).sqrt()
    }
}

/// Largest `|a_ij − a_ji|` relative to the largest `|a_ij|`.
pub fn asymmetry<T: Scalar>(a: ArrayView2<T>) -> f64 {
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for ((i, j), v) in a.indexed_iter() {
        scale = scale.max(v.as_f64().abs());
        worst = worst.max((v.as_f64() - a[[j, i]].as_f64()).abs());
    }
    if scale == 0.0 {
        0.0
    } else {
        worst / scale
    }
}

pub(crate) fn ensure_finite<T: Scalar>(a: ArrayView2<T>, what: &str) -> Result<()> {
    match a.indexed_iter().find(|(_, v)| !v.is_finite()) {
        Some(((i, j), _)) => Err(Error::NonFinite(format!("{what} at ({i}, {j})"))),
        None => Ok(()),
    }
}
