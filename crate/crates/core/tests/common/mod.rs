//! Shared fixtures and dense reference solutions for the integration tests.
#![allow(dead_code)]

use cfsseg::{AnalyticState, ClassId, LabelMatrix, RawLabel, UpdateMode};
use nalgebra::DMatrix;
use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One step of already-expanded features with complete labels.
#[derive(Debug, Clone)]
pub struct Step {
    pub e: Array2<f64>,
    pub labels: Vec<RawLabel>,
    pub new_classes: Vec<ClassId>,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.0..1.0))
}

/// `t` steps of `rows` rows each. Step 1 brings two classes, every later
/// step one more; labels are drawn from the classes seen so far and about
/// one row in twenty is left unlabeled.
pub fn random_stream(d: usize, t: usize, rows: usize, rng: &mut ChaCha8Rng) -> Vec<Step> {
    let mut seen = Vec::new();
    (1..=t)
        .map(|step| {
            let new_classes: Vec<ClassId> = if step == 1 {
                vec![ClassId(0), ClassId(1)]
            } else {
                vec![ClassId(step as u32)]
            };
            seen.extend_from_slice(&new_classes);
            let labels = (0..rows)
                .map(|_| {
                    if rng.random_range(0..20) == 0 {
                        None
                    } else {
                        Some(seen[rng.random_range(0..seen.len())])
                    }
                })
                .collect();
            Step {
                e: uniform(rows, d, rng),
                labels,
                new_classes,
            }
        })
        .collect()
}

pub fn run_recursive(steps: &[Step], gamma: f64, mode: UpdateMode) -> AnalyticState<f64> {
    let first = &steps[0];
    let y = LabelMatrix::new(&first.labels, &first.new_classes).unwrap();
    let mut state = AnalyticState::fit_initial(first.e.view(), &y, gamma).unwrap();
    for s in &steps[1..] {
        state.expand_classes(&s.new_classes).unwrap();
        let y = LabelMatrix::new(&s.labels, state.class_ids()).unwrap();
        state.crls_update(s.e.view(), &y, mode).unwrap();
    }
    state
}

pub fn to_na(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn rel_na(a: ArrayView2<f64>, b: &DMatrix<f64>) -> f64 {
    (to_na(a) - b).norm() / b.norm()
}

/// Ridge solution over every labeled row of `steps`, with zero-padded
/// one-hot targets, computed through an explicit LU inverse.
pub struct BatchOracle {
    pub phi: DMatrix<f64>,
    pub psi: DMatrix<f64>,
}

pub fn batch_oracle(steps: &[Step], gamma: f64) -> BatchOracle {
    let classes: Vec<ClassId> = steps.iter().flat_map(|s| s.new_classes.iter().copied()).collect();
    let d = steps[0].e.ncols();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<usize> = Vec::new();
    for s in steps {
        for (i, l) in s.labels.iter().enumerate() {
            if let Some(c) = l {
                rows.push(s.e.row(i).to_vec());
                targets.push(classes.iter().position(|k| k == c).unwrap());
            }
        }
    }
    let e = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    let y = DMatrix::from_fn(rows.len(), classes.len(), |i, j| if targets[i] == j { 1.0 } else { 0.0 });
    let a = e.transpose() * &e + DMatrix::identity(d, d) * gamma;
    let psi = a.try_inverse().expect("regularized Gram matrix is invertible");
    let phi = &psi * e.transpose() * y;
    BatchOracle { phi, psi }
}

pub fn stack_features(steps: &[Step]) -> Array2<f64> {
    let views: Vec<_> = steps.iter().map(|s| s.e.view()).collect();
    concatenate(Axis(0), &views).unwrap()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: ArrayView2<f64>) -> f64 {
    let m = to_na(a);
    let m = (&m + m.transpose()) * 0.5;
    m.symmetric_eigenvalues().min()
}

pub fn ids(v: &[u32]) -> Vec<ClassId> {
    v.iter().copied().map(ClassId).collect()
}

/// Manifest plus generated stream for a synthetic run.
pub fn synth_setup(
    setting: cfsseg::Setting,
    m: u32,
    n: u32,
    spec: &cfsseg::SynthSpec,
    d_expanded: usize,
) -> (cfsseg::RunManifest, Vec<cfsseg::StepBatch<f64>>, cfsseg::EvalSet<f64>) {
    let mut manifest = cfsseg::RunManifest::new(setting, m, n, spec.n_classes, spec.d_encoder, d_expanded, spec.seed);
    manifest.synth = Some(spec.clone());
    manifest.validate().unwrap();
    let data = cfsseg::synth::synth_generate::<f64>(spec).unwrap();
    let schedule = manifest.class_schedule().unwrap();
    let (steps, eval) = cfsseg::synth::build_stream(&data, &schedule, setting, manifest.background).unwrap();
    (manifest, steps, eval)
}

pub fn ok_stream<T>(steps: Vec<T>) -> impl Iterator<Item = cfsseg::Result<T>> {
    steps.into_iter().map(Ok)
}
