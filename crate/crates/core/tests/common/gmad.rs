//! Sort-based pair selection against exhaustive pair search.

use iqa_troubleshoot::gmad::{partition_levels, select_pairs, uniform_levels};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exhaustive search over ordered pairs: the largest objective, ties to the
/// lexicographically smallest `(x id, y id)`, then both images removed.
fn brute_force(def: &[f64], att: &[f64], cands: &[usize], ids: &[String], k: usize) -> Vec<(usize, usize, f64)> {
    let mut pool: Vec<usize> = cands.to_vec();
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<(f64, usize, usize)> = None;
        for &x in &pool {
            for &y in &pool {
                if x == y {
                    continue;
                }
                let obj = (att[x] - att[y]) - (def[x] - def[y]);
                let better = match best {
                    None => true,
                    Some((b, bx, by)) => obj > b || (obj == b && (&ids[x], &ids[y]) < (&ids[bx], &ids[by])),
                };
                if better {
                    best = Some((obj, x, y));
                }
            }
        }
        let Some((obj, x, y)) = best else { break };
        out.push((x, y, obj));
        pool.retain(|&i| i != x && i != y);
    }
    out
}

/// Level index by direct arithmetic on the level width.
fn level_by_width(score: f64) -> usize {
    ((score / 20.0).floor() as usize).min(4)
}

/// Scores on a dyadic grid so every difference is exact; `step` controls
/// how often values tie.
fn dyadic_scores(r: &mut ChaCha8Rng, n: usize, step: f64) -> Vec<f64> {
    let cells = (100.0 / step) as u64;
    (0..n).map(|_| r.random_range(0..=cells) as f64 * step).collect()
}

pub fn check_instance(seed: u64) -> usize {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = r.random_range(4..=500);
    let step = if seed % 2 == 0 { 4.0 } else { 1.0 / 1_048_576.0 };
    let def = dyadic_scores(&mut r, n, step);
    let att = dyadic_scores(&mut r, n, step);
    let mut ids: Vec<String> = (0..n).map(|i| format!("s{i:04}")).collect();
    ids.reverse();
    let k = 1 + (seed as usize % 3);
    let levels = uniform_levels(5).unwrap();
    let parts = partition_levels(&def, &levels, None);
    let mut checked = 0;
    for (lvl, cands) in parts.iter().enumerate() {
        let expected: Vec<usize> = (0..n).filter(|&i| level_by_width(def[i]) == lvl).collect();
        let mut got_members = cands.clone();
        got_members.sort();
        assert_eq!(got_members, expected, "level {lvl} membership, seed {seed}");
        let fast = select_pairs(&def, &att, cands, &ids, k);
        let slow = brute_force(&def, &att, cands, &ids, k);
        assert_eq!(fast.len(), slow.len(), "seed {seed} level {lvl}");
        for (f, (x, y, obj)) in fast.iter().zip(&slow) {
            assert_eq!((f.x, f.y), (*x, *y), "seed {seed} level {lvl} rank {}", f.k_rank);
            assert_eq!(f.objective, *obj);
        }
        checked += fast.len();
    }
    checked
}

/// 200 random instances, each level checked against the exhaustive search.
pub fn sort_based_selection_equals_exhaustive_search() {
    let pairs: usize = (0..200).map(check_instance).sum();
    assert!(pairs > 1000);
}

pub fn selection_with_everything_tied_takes_the_smallest_ids() {
    let ids: Vec<String> = ["c", "a", "d", "b"].iter().map(|s| s.to_string()).collect();
    let s = select_pairs(&[50.0; 4], &[50.0; 4], &[0, 1, 2, 3], &ids, 2);
    assert_eq!((s[0].x, s[0].y), (1, 3));
    assert_eq!((s[1].x, s[1].y), (0, 2));
}
