//! Correlation metrics against direct computation.

use iqa_troubleshoot::evaluation::{plcc, srcc};
use proptest::prelude::*;

/// Rank of each value as `1 + #smaller + (#equal - 1) / 2`, by counting.
fn counted_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn two_pass_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va.sqrt() * vb.sqrt())
}

fn counted_srcc(a: &[f64], b: &[f64]) -> f64 {
    two_pass_pearson(&counted_ranks(a), &counted_ranks(b))
}

pub fn srcc_worked_examples() {
    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert_eq!(srcc(&a, &a).unwrap(), 1.0);
    let rev: Vec<f64> = a.iter().rev().copied().collect();
    assert_eq!(srcc(&a, &rev).unwrap(), -1.0);
    // two adjacent swaps: sum of squared rank differences is 4
    let swapped = [1.0, 3.0, 2.0, 5.0, 4.0];
    let by_formula = 1.0 - 6.0 * 4.0 / (5.0 * 24.0);
    assert!((srcc(&a, &swapped).unwrap() - by_formula).abs() < 1e-12);
    assert!((by_formula - 0.8).abs() < 1e-12);
}

pub fn plcc_worked_examples() {
    let m = [3.0, 1.0, 4.0, 1.5, 9.0, 2.6];
    let affine: Vec<f64> = m.iter().map(|x| 2.0 * x + 7.0).collect();
    let neg: Vec<f64> = m.iter().map(|x| -x).collect();
    assert!((plcc(&affine, &m).unwrap() - 1.0).abs() < 1e-12);
    assert!((plcc(&neg, &m).unwrap() + 1.0).abs() < 1e-12);
    // cov = 3, var = 2 and 14/3
    let hand = 3.0 / (2.0f64 * 14.0 / 3.0).sqrt();
    let got = plcc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
    assert!((got - hand).abs() < 1e-12);
    assert!((got - 0.98198).abs() < 1e-5);
}

pub fn scores() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..80).prop_flat_map(|n| {
        (
            prop::collection::vec(0u32..40, n).prop_map(|v| v.into_iter().map(|x| x as f64 * 2.5).collect()),
            prop::collection::vec(-1000.0f64..1000.0, n),
        )
    })
}

/// SRCC against counted ranks, symmetric, and unchanged by strictly
/// increasing maps of either argument, over `cases` random inputs.
pub fn srcc_invariance(cases: u32) {
    let mut runner = super::runner(cases);
    runner
        .run(&scores(), |(a, b)| {
            let (a_const, b_const) = (a.iter().all(|x| *x == a[0]), b.iter().all(|x| *x == b[0]));
            prop_assume!(!a_const && !b_const);
            let s = srcc(&a, &b).unwrap();
            prop_assert!((s - counted_srcc(&a, &b)).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!((s - srcc(&b, &a).unwrap()).abs() < 1e-12);
            let cube: Vec<f64> = a.iter().map(|x| x * x * x + 3.0 * x).collect();
            let squash: Vec<f64> = b.iter().map(|y| (y / 300.0).tanh() * 40.0 - 9.0).collect();
            prop_assert!((srcc(&cube, &b).unwrap() - s).abs() < 1e-9);
            prop_assert!((srcc(&a, &squash).unwrap() - s).abs() < 1e-9);
            Ok(())
        })
        .unwrap();
}
