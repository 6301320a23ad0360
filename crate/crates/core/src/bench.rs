//! Timing of the update kernels and the single-pass efficiency comparison.

use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytic::{AnalyticState, UpdateMode};
use crate::error::{Error, Result};
use crate::labels::{ClassId, LabelMatrix};
use crate::pseudo3d::softmax_rows;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// `d_E` values to time.
    pub sizes: Vec<usize>,
    /// Rows per timed update.
    pub n_rows: usize,
    pub n_classes: usize,
    /// Best-of count per measurement.
    #[serde(default = "one")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub efficiency: Option<EfficiencyConfig>,
}

fn one() -> usize {
    1
}

/// Single update pass versus several epochs of gradient descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfficiencyConfig {
    pub d_expanded: usize,
    pub n_rows: usize,
    pub n_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Required `gd_time / update_time`.
    pub min_speedup: f64,
}

impl Default for EfficiencyConfig {
    fn default() -> Self {
        Self {
            d_expanded: 4096,
            n_rows: 1024,
            n_classes: 21,
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.1,
            min_speedup: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeTiming {
    pub d_expanded: usize,
    pub direct_s: f64,
    pub woodbury_s: f64,
}

/// Least-squares fit of `time = a · d³`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubicFit {
    pub coefficient: f64,
    /// `None` with fewer than two sizes.
    pub r_squared: Option<f64>,
    /// Slope of `ln time` against `ln d`.
    pub log_log_exponent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub config: EfficiencyConfig,
    pub update_s: f64,
    pub gd_s: f64,
    pub speedup: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_rows: usize,
    pub timings: Vec<SizeTiming>,
    pub direct_fit: CubicFit,
    /// Woodbury beat direct on the largest size with `n_rows ≪ d_E`;
    /// `None` when the largest size does not satisfy `4·n_rows ≤ d_E`.
    pub woodbury_beats_direct: Option<bool>,
    pub efficiency: Option<EfficiencyReport>,
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.0..1.0))
}

fn random_labels(rows: usize, classes: usize, rng: &mut ChaCha8Rng) -> LabelMatrix {
    let ids: Vec<ClassId> = (0..classes as u32).map(ClassId).collect();
    let raw: Vec<_> = (0..rows).map(|_| Some(ids[rng.random_range(0..classes)])).collect();
    LabelMatrix::new(&raw, &ids).expect("labels drawn from the column list")
}

/// A state that has absorbed no rows: `psi = I/γ`, `phi = 0`.
fn empty_state(d: usize, classes: usize) -> AnalyticState<f64> {
    AnalyticState::from_parts(
        Array2::zeros((d, classes)),
        Array2::eye(d),
        1.0,
        (0..classes as u32).map(ClassId).collect(),
        1,
    )
    .expect("consistent shapes")
}

/// Wall time of one `crls_update` of `n_rows` rows into a `d`-dimensional state.
pub fn time_update(d: usize, n_rows: usize, classes: usize, mode: UpdateMode, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = random_matrix(n_rows, d, &mut rng);
    let y = random_labels(n_rows, classes, &mut rng);
    let mut state = empty_state(d, classes);
    let start = Instant::now();
    state.crls_update(e.view(), &y, mode)?;
    Ok(start.elapsed().as_secs_f64())
}

/// Mini-batch gradient descent on softmax cross-entropy, `epochs` passes.
/// Returns the learned weights.
pub fn gradient_descent_reference(
    features: ArrayView2<f64>,
    labels: &LabelMatrix,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
) -> Array2<f64> {
    let y = labels.dense_kept::<f64>();
    let (n, d) = features.dim();
    let c = labels.n_cols();
    let mut w = Array2::<f64>::zeros((d, c));
    let batch_size = batch_size.max(1);
    for _ in 0..epochs {
        let mut r0 = 0;
        while r0 < n {
            let r1 = (r0 + batch_size).min(n);
            let xb = features.slice(s![r0..r1, ..]);
            let grad = softmax_rows(xb.dot(&w).view()) - y.slice(s![r0..r1, ..]);
            let step = xb.t().dot(&grad);
            w.scaled_add(-learning_rate / (r1 - r0) as f64, &step);
            r0 = r1;
        }
    }
    w
}

pub fn efficiency(cfg: &EfficiencyConfig, seed: u64) -> Result<EfficiencyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = random_matrix(cfg.n_rows, cfg.d_expanded, &mut rng);
    let y = random_labels(cfg.n_rows, cfg.n_classes, &mut rng);

    let mut state = empty_state(cfg.d_expanded, cfg.n_classes);
    let start = Instant::now();
    state.crls_update(e.view(), &y, UpdateMode::Auto)?;
    let update_s = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let w = gradient_descent_reference(e.view(), &y, cfg.epochs, cfg.batch_size, cfg.learning_rate);
    let gd_s = start.elapsed().as_secs_f64();
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient-descent reference weights".into()));
    }
    let speedup = gd_s / update_s;
    Ok(EfficiencyReport {
        config: cfg.clone(),
        update_s,
        gd_s,
        speedup,
        passed: speedup >= cfg.min_speedup,
    })
}

pub fn cubic_fit(sizes: &[usize], times: &[f64]) -> CubicFit {
    let cubes: Vec<f64> = sizes.iter().map(|&d| (d as f64).powi(3)).collect();
    let coefficient = cubes.iter().zip(times).map(|(x, t)| x * t).sum::<f64>() / cubes.iter().map(|x| x * x).sum::<f64>();
    if sizes.len() < 2 {
        return CubicFit {
            coefficient,
            r_squared: None,
            log_log_exponent: None,
        };
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let ss_tot: f64 = times.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = cubes.iter().zip(times).map(|(x, t)| (t - coefficient * x).powi(2)).sum();
    let lx: Vec<f64> = sizes.iter().map(|&d| (d as f64).ln()).collect();
    let ly: Vec<f64> = times.iter().map(|t| t.max(1e-12).ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    CubicFit {
        coefficient,
        r_squared: (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot),
        log_log_exponent: (sxx > 0.0).then(|| sxy / sxx),
    }
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.sizes.is_empty() || cfg.sizes.contains(&0) || cfg.n_rows == 0 || cfg.n_classes == 0 {
        return Err(Error::config("bench needs nonempty positive sizes, rows and classes"));
    }
    let mut sizes = cfg.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let best = |d: usize, mode: UpdateMode| -> Result<f64> {
        let mut t = f64::INFINITY;
        for r in 0..cfg.repeats.max(1) {
            t = t.min(time_update(d, cfg.n_rows, cfg.n_classes, mode, cfg.seed + r as u64)?);
        }
        Ok(t)
    };
    let mut timings = Vec::new();
    for &d in &sizes {
        let direct_s = best(d, UpdateMode::Direct)?;
        let woodbury_s = best(d, UpdateMode::Woodbury)?;
        log::info!("d_E = {d}: direct {direct_s:.4}s, woodbury {woodbury_s:.4}s");
        timings.push(SizeTiming {
            d_expanded: d,
            direct_s,
            woodbury_s,
        });
    }
    let direct: Vec<f64> = timings.iter().map(|t| t.direct_s).collect();
    let largest = timings.last().expect("nonempty sizes");
    let woodbury_beats_direct =
        (4 * cfg.n_rows <= largest.d_expanded).then(|| largest.woodbury_s < largest.direct_s);
    let efficiency = match &cfg.efficiency {
        Some(e) => Some(efficiency(e, cfg.seed)?),
        None => None,
    };
    Ok(BenchReport {
        n_rows: cfg.n_rows,
        direct_fit: cubic_fit(&sizes, &direct),
        timings,
        woodbury_beats_direct,
        efficiency,
    })
}
