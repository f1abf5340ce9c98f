//! Correlation metrics and tournament ranking against direct computation.

use iqa_troubleshoot::datapool::{LabelEntry, LabelRole, LabeledSet};
use iqa_troubleshoot::evaluation::{global_ranking, plcc, srcc, tournament};
use iqa_troubleshoot::gmad::{uniform_levels, GmadPair};
use proptest::prelude::*;

mod common;

use common::metrics::{scores, two_pass_pearson};

#[test]
fn srcc_worked_examples() {
    common::metrics::srcc_worked_examples();
}

#[test]
fn plcc_worked_examples() {
    common::metrics::plcc_worked_examples();
}

#[test]
fn srcc_matches_counting_and_ignores_monotone_maps() {
    common::metrics::srcc_invariance(1000);
}

#[test]
fn degenerate_inputs_are_rejected() {
    assert!(srcc(&[1.0], &[1.0]).is_err());
    assert!(srcc(&[1.0, 2.0], &[1.0]).is_err());
    assert!(srcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    assert!(plcc(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn plcc_is_affine_invariant_and_flips_under_negation((a, b) in scores(), k in 0.01f64..50.0, c in -100.0f64..100.0) {
        prop_assume!(a.iter().any(|x| *x != a[0]) && b.iter().any(|x| *x != b[0]));
        let p = plcc(&a, &b).unwrap();
        prop_assert!((p - two_pass_pearson(&a, &b)).abs() < 1e-9);
        let scaled: Vec<f64> = a.iter().map(|x| k * x + c).collect();
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        prop_assert!((plcc(&scaled, &b).unwrap() - p).abs() < 1e-9);
        prop_assert!((plcc(&neg, &b).unwrap() + p).abs() < 1e-9);
    }
}

fn pair(attacker: &str, defender: &str, x: &str, y: &str) -> GmadPair {
    GmadPair {
        pair_id: format!("{attacker}-{defender}-{x}-{y}"),
        x_id: x.into(),
        y_id: y.into(),
        attacker: attacker.into(),
        defender: defender.into(),
        level: 0,
        k_rank: 0,
        objective: 0.0,
        round: 0,
    }
}

fn labels(entries: &[(&str, f64)]) -> LabeledSet {
    let mut set = LabeledSet::new(LabelRole::Tournament);
    for (id, mos) in entries {
        set.insert(
            id,
            LabelEntry {
                mos: *mos,
                std: 0.0,
                n_ratings: 3,
            },
        )
        .unwrap();
    }
    set
}

#[test]
fn two_model_ranking_is_antisymmetric() {
    let models = vec!["a".to_string(), "b".to_string()];
    let l = labels(&[("p", 80.0), ("q", 30.0), ("r", 55.0), ("s", 50.0)]);
    let pairs = vec![pair("a", "b", "p", "q"), pair("b", "a", "r", "s")];
    let r = global_ranking(&pairs, &l, &models).unwrap();
    assert!((r.raw_aggressiveness[0] - 0.5).abs() < 1e-12);
    assert!((r.raw_aggressiveness[1] - 0.05).abs() < 1e-12);
    assert!((r.aggressiveness[0] + r.aggressiveness[1]).abs() < 1e-12);
    assert!(r.aggressiveness[0] > 0.0);
    assert!((r.resistance[0] + r.resistance[1]).abs() < 1e-12);
    assert!(r.resistance[0] > r.resistance[1]);
    assert_eq!(r.gaps[0][0], None);
    assert_eq!(r.gaps[1][1], None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn standardized_rankings_sum_to_zero(
        games in prop::collection::vec((0usize..4, 1usize..4, 0usize..12, 0usize..12), 1..60),
        mos in prop::collection::vec(0.0f64..100.0, 12),
    ) {
        let models: Vec<String> = (0..4).map(|i| format!("m{i}")).collect();
        let entries: Vec<(String, f64)> = mos.iter().enumerate().map(|(i, m)| (format!("s{i}"), *m)).collect();
        let l = labels(&entries.iter().map(|(i, m)| (i.as_str(), *m)).collect::<Vec<_>>());
        let pairs: Vec<GmadPair> = games
            .iter()
            .filter(|g| g.2 != g.3)
            .map(|&(a, off, x, y)| pair(&models[a], &models[(a + off) % 4], &format!("s{x}"), &format!("s{y}")))
            .collect();
        let r = global_ranking(&pairs, &l, &models).unwrap();
        prop_assert!(r.aggressiveness.iter().sum::<f64>().abs() < 1e-9);
        prop_assert!(r.resistance.iter().sum::<f64>().abs() < 1e-9);
        for v in [&r.aggressiveness, &r.resistance] {
            let var = v.iter().map(|x| x * x).sum::<f64>() / 4.0;
            prop_assert!(var.abs() < 1e-12 || (var - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn zero_gaps_rank_everyone_equal() {
    let models = vec!["a".to_string(), "b".to_string(), "c".to_string()];
    let l = labels(&[("p", 40.0), ("q", 40.0)]);
    let pairs = vec![
        pair("a", "b", "p", "q"),
        pair("c", "a", "q", "p"),
        pair("b", "c", "p", "q"),
    ];
    let r = global_ranking(&pairs, &l, &models).unwrap();
    assert!(r.raw_aggressiveness.iter().chain(&r.raw_resistance).all(|v| *v == 0.0));
    assert!(r.aggressiveness.iter().chain(&r.resistance).all(|v| *v == 0.0));
}

#[test]
fn three_models_play_six_role_assignments_of_one_hundred_pairs() {
    let n = 2000;
    let ids: Vec<String> = (0..n).map(|i| format!("s{i:05}")).collect();
    let models: Vec<(String, Vec<f64>)> = (0..3)
        .map(|m| {
            let scores = (0..n)
                .map(|i| ((i * (7 + 2 * m) + 13 * m) % 1000) as f64 / 10.0)
                .collect();
            (format!("f{m}"), scores)
        })
        .collect();
    let levels = uniform_levels(5).unwrap();
    let pairs = tournament(&models, &ids, None, &levels, 20, 0);
    let mut per_game = std::collections::BTreeMap::new();
    for p in &pairs {
        *per_game.entry((p.attacker.clone(), p.defender.clone())).or_insert(0) += 1;
    }
    assert_eq!(per_game.len(), 6);
    for a in 0..3 {
        for b in a + 1..3 {
            let (x, y) = (format!("f{a}"), format!("f{b}"));
            assert_eq!(per_game[&(x.clone(), y.clone())] + per_game[&(y, x)], 100);
        }
    }
    assert!(tournament(&models[..1], &ids, None, &levels, 20, 0).is_empty());
}
