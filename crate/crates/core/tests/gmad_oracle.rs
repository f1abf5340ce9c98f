//! Sort-based pair selection against exhaustive pair search.

mod common;

use common::gmad;
use iqa_troubleshoot::gmad::select_pairs;
use proptest::prelude::*;

#[test]
fn sort_based_selection_equals_exhaustive_search() {
    gmad::sort_based_selection_equals_exhaustive_search();
}

#[test]
fn selection_with_everything_tied_takes_the_smallest_ids() {
    gmad::selection_with_everything_tied_takes_the_smallest_ids();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn objective_is_the_difference_of_score_gaps(
        scores in prop::collection::vec((0u32..=400, 0u32..=400), 2..60),
        k in 1usize..4,
    ) {
        let def: Vec<f64> = scores.iter().map(|s| s.0 as f64 / 4.0).collect();
        let att: Vec<f64> = scores.iter().map(|s| s.1 as f64 / 4.0).collect();
        let ids: Vec<String> = (0..def.len()).map(|i| format!("{i:03}")).collect();
        let cands: Vec<usize> = (0..def.len()).collect();
        let sel = select_pairs(&def, &att, &cands, &ids, k);
        prop_assert_eq!(sel.len(), k.min(def.len() / 2));
        let mut seen = std::collections::HashSet::new();
        let mut last = f64::INFINITY;
        for s in &sel {
            prop_assert!(s.objective >= 0.0);
            prop_assert!(s.objective <= last);
            last = s.objective;
            prop_assert_eq!(s.objective, (att[s.x] - att[s.y]) - (def[s.x] - def[s.y]));
            prop_assert!(seen.insert(s.x) && seen.insert(s.y));
        }
    }
}
