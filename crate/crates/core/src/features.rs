//! Random hidden-layer expansion of encoder features.
//!
//! Weight `(i, j)` of a projector is a pure function of `(seed, i, j)`:
//! a ChaCha8 generator keyed by `seed` is switched to stream `i`, and the
//! four 32-bit words at word positions `4j..4j+4` are read as two `u64`
//! values `a`, `b`. With `u1 = 1 − (a >> 11)·2⁻⁵³ ∈ (0, 1]` and
//! `u2 = (b >> 11)·2⁻⁵³`, the weight is
//! `scale · √(−2 ln u1) · cos(2π u2)` (Box–Muller, cosine branch only).

use ndarray::{s, Array2, ArrayView2, Axis};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Fixed random linear map followed by ReLU.
#[derive(Debug, Clone)]
pub struct RhlProjector<T> {
    weights: Array2<T>,
    seed: u64,
    scale: f64,
}

/// The `(seed, row, col)` entry of a unit-variance projector.
pub fn normal_weight(seed: u64, row: u64, col: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row);
    rng.set_word_pos(4 * col as u128);
    box_muller(rng.next_u64(), rng.next_u64())
}

#[inline]
fn box_muller(a: u64, b: u64) -> f64 {
    const UNIT: f64 = 1.0 / (1u64 << 53) as f64;
    let u1 = 1.0 - (a >> 11) as f64 * UNIT;
    let u2 = (b >> 11) as f64 * UNIT;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl<T: Scalar> RhlProjector<T> {
    /// Draws a `d_encoder × d_expanded` weight matrix with entries `N(0, scale²)`.
    pub fn build(seed: u64, d_encoder: usize, d_expanded: usize, scale: f64) -> Result<Self> {
        if d_encoder == 0 || d_expanded == 0 {
            return Err(Error::config(format!(
                "projector dimensions must be positive, got {d_encoder}x{d_expanded}"
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::config(format!("projector scale must be positive, got {scale}")));
        }
        let mut weights = Array2::<T>::zeros((d_encoder, d_expanded));
        weights
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(i, mut row)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                rng.set_word_pos(0);
                for w in row.iter_mut() {
                    let a = rng.next_u64();
                    let b = rng.next_u64();
                    *w = T::of(scale * box_muller(a, b));
                }
            });
        Ok(Self { weights, seed, scale })
    }

    pub fn weights(&self) -> ArrayView2<'_, T> {
        self.weights.view()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn d_encoder(&self) -> usize {
        self.weights.nrows()
    }

    pub fn d_expanded(&self) -> usize {
        self.weights.ncols()
    }

    /// `max(0, X W)`. Non-finite inputs are rejected, since ReLU would hide NaN.
    pub fn expand(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_width(x)?;
        let mut out = x.dot(&self.weights);
        out.mapv_inplace(relu);
        Ok(out)
    }

    /// Same values as [`expand`](Self::expand), computed `chunk_rows` rows at a time.
    pub fn expand_chunked(&self, x: ArrayView2<T>, chunk_rows: usize) -> Result<Array2<T>> {
        self.check_width(x)?;
        let chunk_rows = chunk_rows.max(1);
        let mut out = Array2::<T>::zeros((x.nrows(), self.d_expanded()));
        let mut r0 = 0;
        while r0 < x.nrows() {
            let r1 = (r0 + chunk_rows).min(x.nrows());
            let mut block = x.slice(s![r0..r1, ..]).dot(&self.weights);
            block.mapv_inplace(relu);
            out.slice_mut(s![r0..r1, ..]).assign(&block);
            r0 = r1;
        }
        Ok(out)
    }

    fn check_width(&self, x: ArrayView2<T>) -> Result<()> {
        if x.ncols() != self.d_encoder() {
            return Err(Error::shape(format!(
                "encoder features have {} columns but the projector expects d_encoder = {}",
                x.ncols(),
                self.d_encoder()
            )));
        }
        crate::linalg::ensure_finite(x, "encoder features")
    }
}

#[inline]
fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}
