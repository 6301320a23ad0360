mod common;

use cfsseg::linalg::{asymmetry, rel_frobenius, Cholesky};
use cfsseg::{AnalyticState, ClassId, LabelMatrix, UpdateMode};
use common::*;
use ndarray::{s, Array2, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn fit_initial_matches_dense_normal_equations() {
    let mut r = rng(11);
    let e = uniform(50, 8, &mut r);
    let classes = ids(&[0, 1, 2]);
    let labels: Vec<_> = (0..50).map(|_| Some(classes[r.random_range(0..3)])).collect();
    let step = Step {
        e: e.clone(),
        labels: labels.clone(),
        new_classes: classes.clone(),
    };
    let oracle = batch_oracle(&[step], 1.0);
    let state = AnalyticState::fit_initial(e.view(), &LabelMatrix::new(&labels, &classes).unwrap(), 1.0).unwrap();
    assert!(rel_na(state.phi(), &oracle.phi) <= 1e-10);
    assert!(rel_na(state.psi(), &oracle.psi) <= 1e-10);
}

#[test]
fn five_step_growth_matches_batch_fit() {
    let mut r = rng(5);
    let mut steps = random_stream(16, 5, 100, &mut r);
    // classes grow 2 -> 6
    assert_eq!(steps.iter().map(|s| s.new_classes.len()).sum::<usize>(), 6);
    let state = run_recursive(&steps, 1.0, UpdateMode::Auto);
    let oracle = batch_oracle(&steps, 1.0);
    assert!(rel_na(state.phi(), &oracle.phi) <= 1e-9);
    assert_eq!(state.step_index(), 5);
}

#[test]
fn woodbury_and_direct_agree() {
    let mut r = rng(21);
    for (d, rows) in [(32, 10), (32, 80), (64, 40)] {
        let steps = random_stream(d, 4, rows, &mut r);
        let w = run_recursive(&steps, 1.0, UpdateMode::Woodbury);
        let x = run_recursive(&steps, 1.0, UpdateMode::Direct);
        assert!(rel_frobenius(w.phi(), x.phi()) <= 1e-8);
        assert!(rel_frobenius(w.psi(), x.psi()) <= 1e-8);
    }
}

#[test]
fn psi_matches_explicit_inverse_and_stays_symmetric() {
    let mut r = rng(3);
    let steps = random_stream(48, 6, 30, &mut r);
    for mode in [UpdateMode::Direct, UpdateMode::Woodbury] {
        let state = run_recursive(&steps, 0.5, mode);
        let oracle = batch_oracle(&steps, 0.5);
        assert!(rel_na(state.psi(), &oracle.psi) <= 1e-8);
        assert!(asymmetry(state.psi()) <= 1e-10);
        assert!(Cholesky::factor(state.psi()).is_ok());
    }
}

#[test]
fn row_permutation_within_a_step_leaves_psi_unchanged() {
    let mut r = rng(8);
    let steps = random_stream(24, 3, 40, &mut r);
    let base = run_recursive(&steps, 1.0, UpdateMode::Auto);
    let mut shuffled = steps.clone();
    for s in shuffled.iter_mut() {
        let mut order: Vec<usize> = (0..s.labels.len()).collect();
        order.shuffle(&mut r);
        s.e = s.e.select(Axis(0), &order);
        s.labels = order.iter().map(|&i| s.labels[i]).collect();
    }
    let other = run_recursive(&shuffled, 1.0, UpdateMode::Auto);
    assert!(rel_frobenius(base.psi(), other.psi()) <= 1e-9);
    assert!(rel_frobenius(base.phi(), other.phi()) <= 1e-9);
}

#[test]
fn step_permutation_leaves_psi_unchanged() {
    let mut r = rng(9);
    // every step carries the same two classes so any order is a valid stream
    let mut steps = random_stream(24, 4, 25, &mut r);
    for (k, s) in steps.iter_mut().enumerate() {
        s.new_classes = if k == 0 { ids(&[0, 1]) } else { vec![] };
        for l in s.labels.iter_mut() {
            *l = l.map(|c| ClassId(c.0 % 2));
        }
    }
    let base = run_recursive(&steps, 1.0, UpdateMode::Auto);
    let mut order = steps.clone();
    order.reverse();
    order[0].new_classes = ids(&[0, 1]);
    order[3].new_classes = vec![];
    let other = run_recursive(&order, 1.0, UpdateMode::Auto);
    assert!(rel_frobenius(base.psi(), other.psi()) <= 1e-9);
    assert!(rel_frobenius(base.phi(), other.phi()) <= 1e-9);
}

#[test]
fn equal_gram_streams_give_bitwise_equal_psi() {
    // Flipping the sign of a row keeps EᵀE exactly, since every product
    // picks up the sign twice.
    let mut r = rng(13);
    let steps = random_stream(12, 3, 20, &mut r);
    let mut flipped = steps.clone();
    for s in flipped.iter_mut() {
        for i in (0..s.e.nrows()).step_by(2) {
            s.e.row_mut(i).mapv_inplace(|v| -v);
        }
    }
    assert_ne!(stack_features(&steps), stack_features(&flipped));
    for mode in [UpdateMode::Direct, UpdateMode::Woodbury] {
        let a = run_recursive(&steps, 1.0, mode);
        let b = run_recursive(&flipped, 1.0, mode);
        assert_eq!(a.psi(), b.psi());
    }
}

#[test]
fn psi_stays_positive_definite_over_many_updates() {
    let mut r = rng(17);
    let d = 20;
    let classes = ids(&[0, 1, 2]);
    let e = uniform(5, d, &mut r);
    let y = LabelMatrix::new(&[Some(classes[0]), Some(classes[1]), Some(classes[2]), None, Some(classes[1])], &classes).unwrap();
    let mut state = AnalyticState::fit_initial(e.view(), &y, 1.0).unwrap();
    for k in 0..120 {
        let rows = 1 + k % 7;
        let e = uniform(rows, d, &mut r).mapv(|v| v * 4.0 - 1.0);
        let labels: Vec<_> = (0..rows).map(|_| Some(classes[r.random_range(0..3)])).collect();
        let mode = if k % 2 == 0 { UpdateMode::Woodbury } else { UpdateMode::Direct };
        state.crls_update(e.view(), &LabelMatrix::new(&labels, &classes).unwrap(), mode).unwrap();
        assert!(Cholesky::factor(state.psi()).is_ok(), "update {k}");
        assert!(asymmetry(state.psi()) <= 1e-10);
    }
    assert!(min_eigenvalue(state.psi()) > 0.0);
}

#[test]
fn chunked_step_equals_single_update() {
    let mut r = rng(23);
    let steps = random_stream(32, 2, 90, &mut r);
    let whole = run_recursive(&steps, 1.0, UpdateMode::Auto);

    let mut chunked = run_recursive(&steps[..1], 1.0, UpdateMode::Auto);
    chunked.expand_classes(&steps[1].new_classes).unwrap();
    for (a, b) in [(0, 30), (30, 31), (31, 90)] {
        let y = LabelMatrix::new(&steps[1].labels[a..b], chunked.class_ids()).unwrap();
        chunked
            .crls_update(steps[1].e.slice(s![a..b, ..]), &y, UpdateMode::Auto)
            .unwrap();
    }
    assert!(rel_frobenius(whole.phi(), chunked.phi()) <= 1e-9);
    assert!(rel_frobenius(whole.psi(), chunked.psi()) <= 1e-9);
}

#[test]
fn predict_matches_elementwise_dot_products() {
    let mut r = rng(29);
    let steps = random_stream(10, 3, 30, &mut r);
    let state = run_recursive(&steps, 1.0, UpdateMode::Auto);
    let e = uniform(7, 10, &mut r);
    let p = state.predict(e.view()).unwrap();
    let phi = state.phi();
    for i in 0..7 {
        let mut best = (0, f64::NEG_INFINITY);
        for c in 0..phi.ncols() {
            let mut v = 0.0;
            for k in 0..10 {
                v += e[[i, k]] * phi[[k, c]];
            }
            assert!((p.logits[[i, c]] - v).abs() <= 1e-12);
            if v > best.1 {
                best = (c, v);
            }
        }
        assert_eq!(p.columns[i], best.0);
        assert_eq!(p.labels[i], state.class_ids()[best.0]);
    }
}

#[test]
fn unknown_class_in_update_is_rejected() {
    let mut r = rng(31);
    let steps = random_stream(8, 1, 10, &mut r);
    let mut state = run_recursive(&steps, 1.0, UpdateMode::Auto);
    let y = LabelMatrix::new(&[Some(ClassId(0))], &ids(&[0, 1, 7])).unwrap();
    let before = state.clone();
    assert!(state.crls_update(Array2::<f64>::ones((1, 8)).view(), &y, UpdateMode::Auto).is_err());
    assert_eq!(state, before);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_partition_matches_batch_fit(
        seed in any::<u64>(),
        d in 4usize..24,
        t in 1usize..6,
        rows in 1usize..30,
        woodbury in any::<bool>(),
    ) {
        let mut r = rng(seed);
        let steps = random_stream(d, t, rows, &mut r);
        let mode = if woodbury { UpdateMode::Woodbury } else { UpdateMode::Direct };
        let state = run_recursive(&steps, 1.0, mode);
        let oracle = batch_oracle(&steps, 1.0);
        prop_assert!(rel_na(state.phi(), &oracle.phi) <= 1e-9 || oracle.phi.norm() == 0.0);
        prop_assert!(rel_na(state.psi(), &oracle.psi) <= 1e-9);
        prop_assert!(asymmetry(state.psi()) <= 1e-10);
    }
}
