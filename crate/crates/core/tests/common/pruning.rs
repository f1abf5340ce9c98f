//! Gradients against central differences, and every pruning criterion
//! against an independent recomputation of its scores.

use iqa_troubleshoot::model::{Example, Model};
use iqa_troubleshoot::pruning::{
    distance_sum, geometric_median, prune, unit_budget, weight_budget, Criterion, PruneSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_model(widths: &[usize], seed: u64) -> Model {
    let mut m = Model::init(widths, seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for l in m.layers.iter_mut() {
        for w in l.weights.iter_mut() {
            *w += r.random_range(-0.3..0.3);
        }
        for b in l.bias.iter_mut() {
            *b = r.random_range(-0.5..0.5);
        }
        for g in l.gamma.iter_mut() {
            *g = r.random_range(0.2..2.0);
        }
    }
    for s in m.input_scale.iter_mut() {
        *s = r.random_range(0.5..1.5);
    }
    m
}

fn random_data(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n)
        .map(|_| (0..dim).map(|_| r.random_range(-1.5..1.5)).collect())
        .collect();
    let y = (0..n).map(|_| r.random_range(0.0..100.0)).collect();
    (x, y)
}

fn examples<'a>(x: &'a [Vec<f64>], y: &[f64]) -> Vec<Example<'a>> {
    x.iter()
        .zip(y)
        .map(|(f, t)| Example {
            features: f,
            target: *t,
        })
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn output_gradient_matches_central_differences() {
    for seed in 0..4 {
        let m = random_model(&[8, 12, 6, 1], seed);
        let (xs, _) = random_data(3, 8, seed + 100);
        for x in &xs {
            let g = m.param_gradient(x);
            let p = m.params_flat();
            for k in 0..p.len() {
                let h = 1e-5 * p[k].abs().max(1.0);
                let mut a = m.clone();
                let mut q = p.clone();
                q[k] += h;
                a.set_params_flat(&q);
                let up = a.forward(x);
                q[k] -= 2.0 * h;
                a.set_params_flat(&q);
                let down = a.forward(x);
                let fd = (up - down) / (2.0 * h);
                assert!(rel_err(g[k], fd) < 1e-4, "param {k}: analytic {} vs numeric {fd}", g[k]);
            }
        }
    }
}

pub fn loss_gradient_matches_central_differences() {
    let m = random_model(&[6, 10, 5, 1], 9);
    let (xs, ys) = random_data(16, 6, 11);
    let data = examples(&xs, &ys);
    let batch: Vec<usize> = (0..data.len()).collect();
    let (_, g) = m.loss_gradient(&data, &batch);
    let g: Vec<f64> = g.concat();
    let p = m.params_flat();
    for k in 0..p.len() {
        let h = 1e-5 * p[k].abs().max(1.0);
        let mut a = m.clone();
        let mut q = p.clone();
        q[k] += h;
        a.set_params_flat(&q);
        let up = a.mse(&data);
        q[k] -= 2.0 * h;
        a.set_params_flat(&q);
        let down = a.mse(&data);
        let fd = (up - down) / (2.0 * h);
        assert!(rel_err(g[k], fd) < 1e-4, "param {k}: {} vs {fd}", g[k]);
    }
}

pub fn masked_parameters_receive_no_gradient() {
    let mut m = random_model(&[5, 8, 4, 1], 3);
    m.mask_unit(0, 2);
    m.layers[1].weight_mask[5] = 0;
    m.apply_masks();
    let (xs, _) = random_data(4, 5, 4);
    for x in &xs {
        let g = m.param_gradient(x);
        let mut probe = m.clone();
        probe.set_params_flat(&g);
        for (l, lp) in m.layers.iter().zip(&probe.layers) {
            for (k, mask) in l.weight_mask.iter().enumerate() {
                if *mask == 0 {
                    assert_eq!(lp.weights[k], 0.0);
                }
            }
        }
    }
}

/// Indices of the `count` smallest values, ties by index.
fn bottom(scores: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(count);
    idx.sort();
    idx
}

fn masked_units(m: &Model, layer: usize) -> Vec<usize> {
    m.layers[layer]
        .unit_mask
        .iter()
        .enumerate()
        .filter(|(_, v)| **v == 0)
        .map(|(u, _)| u)
        .collect()
}

fn rows(m: &Model, layer: usize) -> Vec<Vec<f64>> {
    let l = &m.layers[layer];
    (0..l.out_dim)
        .map(|u| l.weights[u * l.in_dim..(u + 1) * l.in_dim].to_vec())
        .collect()
}

/// Geometric median by gradient descent with backtracking on the smoothed
/// objective `sum sqrt(|p - y|^2 + eps^2)`.
fn smoothed_median(points: &[Vec<f64>]) -> Vec<f64> {
    let dim = points[0].len();
    let eps = 1e-10;
    let obj = |y: &[f64]| -> f64 {
        points
            .iter()
            .map(|p| (p.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + eps * eps).sqrt())
            .sum()
    };
    let mut y: Vec<f64> = (0..dim)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / points.len() as f64)
        .collect();
    let mut step = 1.0;
    for _ in 0..20_000 {
        let mut g = vec![0.0; dim];
        for p in points {
            let d = (p.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + eps * eps).sqrt();
            for j in 0..dim {
                g[j] += (y[j] - p[j]) / d;
            }
        }
        let gn: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gn < 1e-12 {
            break;
        }
        let f0 = obj(&y);
        step *= 2.0;
        loop {
            let cand: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            if obj(&cand) <= f0 - 0.5 * step * gn * gn {
                y = cand;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                return y;
            }
        }
    }
    y
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn oracle_unit_scores(m: &Model, layer: usize, criterion: Criterion, data: &[Example]) -> Vec<f64> {
    let r = rows(m, layer);
    match criterion {
        Criterion::L1Filter => r.iter().map(|row| row.iter().map(|w| w.abs()).sum()).collect(),
        Criterion::L2Filter => r
            .iter()
            .map(|row| row.iter().map(|w| w * w).sum::<f64>().sqrt())
            .collect(),
        Criterion::Slimming => m.layers[layer].gamma.iter().map(|g| g.abs()).collect(),
        Criterion::Fpgm => {
            let med = smoothed_median(&r);
            r.iter().map(|row| euclid(row, &med)).collect()
        }
        Criterion::TaylorFo => (0..r.len())
            .map(|u| {
                let gamma = m.layers[layer].gamma[u];
                data.iter()
                    .map(|e| {
                        let one = std::slice::from_ref(e);
                        let h = 1e-6;
                        let mut a = m.clone();
                        a.layers[layer].gamma[u] = gamma + h;
                        let up = a.mse(one);
                        a.layers[layer].gamma[u] = gamma - h;
                        let down = a.mse(one);
                        let t = gamma * (up - down) / (2.0 * h);
                        t * t
                    })
                    .sum()
            })
            .collect(),
        Criterion::Omp => unreachable!(),
    }
}

pub fn unit_criteria_mask_the_bottom_of_an_independent_score() {
    let (xs, ys) = random_data(24, 8, 77);
    let data = examples(&xs, &ys);
    for seed in 0..3 {
        let m = random_model(&[8, 16, 12, 1], 40 + seed);
        for criterion in [
            Criterion::L1Filter,
            Criterion::L2Filter,
            Criterion::TaylorFo,
            Criterion::Slimming,
            Criterion::Fpgm,
        ] {
            for ratio in [0.3, 0.5, 0.7] {
                let pruned = prune(&m, &PruneSpec::new(criterion, ratio).unwrap(), Some(&data)).unwrap();
                for layer in [0, 1] {
                    let units = m.layers[layer].out_dim;
                    let want = bottom(
                        &oracle_unit_scores(&m, layer, criterion, &data),
                        unit_budget(units, ratio),
                    );
                    assert_eq!(
                        masked_units(&pruned, layer),
                        want,
                        "{} ratio {ratio} layer {layer} seed {seed}",
                        criterion.name()
                    );
                }
                assert!(masked_units(&pruned, 2).is_empty());
            }
        }
    }
}

pub fn fpgm_on_a_wide_layer_picks_the_units_nearest_the_median() {
    let m = random_model(&[8, 64, 1], 5);
    let r = rows(&m, 0);
    let med = smoothed_median(&r);
    let dist: Vec<f64> = r.iter().map(|row| euclid(row, &med)).collect();
    let ours = geometric_median(&r, 1e-12).unwrap();
    assert!(distance_sum(&r, &ours) <= distance_sum(&r, &med) + 1e-9);
    let pruned = prune(&m, &PruneSpec::new(Criterion::Fpgm, 0.5).unwrap(), None).unwrap();
    assert_eq!(masked_units(&pruned, 0), bottom(&dist, 32));
}

pub fn omp_masks_the_globally_smallest_magnitudes() {
    for seed in 0..5 {
        let m = random_model(&[8, 20, 10, 1], seed);
        for ratio in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let pruned = prune(&m, &PruneSpec::new(Criterion::Omp, ratio).unwrap(), None).unwrap();
            let mut all: Vec<(f64, usize, usize)> = Vec::new();
            for li in 0..m.layers.len() - 1 {
                for (k, w) in m.layers[li].weights.iter().enumerate() {
                    all.push((w.abs(), li, k));
                }
            }
            let budget = (ratio * all.len() as f64).floor() as usize;
            assert_eq!(weight_budget(&m, ratio), budget);
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut want: Vec<(usize, usize)> = all[..budget].iter().map(|t| (t.1, t.2)).collect();
            want.sort();
            let mut got = Vec::new();
            for (li, l) in pruned.layers.iter().enumerate() {
                for (k, v) in l.weight_mask.iter().enumerate() {
                    if *v == 0 {
                        got.push((li, k));
                        assert_eq!(l.weights[k], 0.0);
                    }
                }
            }
            assert_eq!(got, want, "ratio {ratio} seed {seed}");
        }
    }
}

pub fn mask_budgets_are_exact_for_every_criterion_and_ratio() {
    let (xs, ys) = random_data(8, 6, 1);
    let data = examples(&xs, &ys);
    for widths in [vec![6, 3, 1], vec![6, 7, 5, 1], vec![6, 64, 32, 1]] {
        let m = random_model(&widths, 2);
        for criterion in Criterion::ALL {
            for ratio in [0.05, 0.3, 0.5, 0.7, 0.95] {
                let p = prune(&m, &PruneSpec::new(criterion, ratio).unwrap(), Some(&data)).unwrap();
                if criterion == Criterion::Omp {
                    let masked: usize = p
                        .layers
                        .iter()
                        .map(|l| l.weight_mask.iter().filter(|v| **v == 0).count())
                        .sum();
                    assert_eq!(masked, weight_budget(&m, ratio));
                } else {
                    for (li, _) in m.hidden_layers() {
                        let units = m.layers[li].out_dim;
                        assert_eq!(masked_units(&p, li).len(), unit_budget(units, ratio));
                        assert!(masked_units(&p, li).len() < units);
                    }
                }
            }
        }
    }
}

/// Minimum of the distance sum over nested grids, each zooming onto the
/// best cell of the previous one.
fn grid_minimum(points: &[Vec<f64>]) -> f64 {
    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
    for p in points {
        for j in 0..2 {
            lo[j] = lo[j].min(p[j]);
            hi[j] = hi[j].max(p[j]);
        }
    }
    let mut best = f64::MAX;
    let mut center = [0.0; 2];
    let n = 200;
    for _ in 0..12 {
        for i in 0..=n {
            for k in 0..=n {
                let y = [
                    lo[0] + (hi[0] - lo[0]) * i as f64 / n as f64,
                    lo[1] + (hi[1] - lo[1]) * k as f64 / n as f64,
                ];
                let v = distance_sum(points, &y);
                if v < best {
                    best = v;
                    center = y;
                }
            }
        }
        let span = [(hi[0] - lo[0]) / n as f64 * 4.0, (hi[1] - lo[1]) / n as f64 * 4.0];
        lo = [center[0] - span[0], center[1] - span[1]];
        hi = [center[0] + span[0], center[1] + span[1]];
    }
    best
}

pub fn weiszfeld_matches_grid_search_in_two_dimensions() {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..10 {
        let n = if case == 0 { 20 } else { r.random_range(3..40) };
        let mut pts: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)])
            .collect();
        if case % 3 == 1 {
            // a heavy cluster on one data point puts the median on it
            for _ in 0..n {
                pts.push(pts[0].clone());
            }
        }
        let med = geometric_median(&pts, 1e-12).unwrap();
        let ours = distance_sum(&pts, &med);
        let grid = grid_minimum(&pts);
        assert!((ours - grid).abs() <= 1e-6, "case {case}: {ours} vs {grid}");
    }
}
