//! One-shot sample selectors compared against gMAD sampling.
//!
//! Every selector returns `min(budget, candidates)` distinct sample
//! positions; ties are broken by sample id so the result does not depend on
//! the order in which candidates are presented.

use std::collections::HashSet;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::datapool::Sample;
use crate::error::{Error, Result};
use crate::evaluation::Correlation;
use crate::gmad::GmadPair;
use crate::model::{self, Example, Model, TrainConfig};
use crate::rng;
use crate::scores::ScoreMatrix;

/// Candidate positions sorted by sample id.
fn by_id(candidates: &[usize], ids: &[String]) -> Vec<usize> {
    let mut c = candidates.to_vec();
    c.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    c
}

/// The `budget` highest-scoring positions, ties by sample id.
pub fn top_by_score(candidates: &[usize], ids: &[String], score: &[f64], budget: usize) -> Vec<usize> {
    let mut c = candidates.to_vec();
    c.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then_with(|| ids[a].cmp(&ids[b])));
    c.truncate(budget);
    c
}

pub fn select_random(candidates: &[usize], ids: &[String], budget: usize, seed: u64) -> Vec<usize> {
    let c = by_id(candidates, ids);
    let take = budget.min(c.len());
    sample_indices(&mut rng::stream(seed, "select/random"), c.len(), take)
        .into_iter()
        .map(|i| c[i])
        .collect()
}

/// Population variance of the committee per sample.
pub fn committee_variance(committee: &ScoreMatrix) -> Vec<f64> {
    let k = committee.n_models() as f64;
    (0..committee.n_samples())
        .map(|j| {
            let col = committee.column(j);
            let m = col.iter().sum::<f64>() / k;
            col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / k
        })
        .collect()
}

/// Query by committee: largest committee disagreement first.
pub fn select_qbc(committee: &ScoreMatrix, candidates: &[usize], budget: usize) -> Vec<usize> {
    top_by_score(
        candidates,
        committee.sample_ids(),
        &committee_variance(committee),
        budget,
    )
}

/// Norm of the gradient of `f`'s MOS-scale output (before clamping) with
/// respect to its parameters.
pub fn output_gradient_norm(f: &Model, x: &[f64]) -> f64 {
    let slope = f.scale_map.slope(f.forward(x));
    slope.abs() * f.param_gradient(x).iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Expected model change: `mean_h |f(x) - h(x)| * ||grad f(x)||`, with the
/// committee standing in for label estimates.
pub fn emcm_scores(f: &Model, f_scores: &[f64], committee: &ScoreMatrix, samples: &[Sample]) -> Vec<f64> {
    let k = committee.n_models() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let dev = committee.column(j).iter().map(|h| (f_scores[j] - h).abs()).sum::<f64>() / k;
            if dev == 0.0 {
                0.0
            } else {
                dev * output_gradient_norm(f, &s.features)
            }
        })
        .collect()
}

pub fn select_emcm(
    f: &Model,
    f_scores: &[f64],
    committee: &ScoreMatrix,
    samples: &[Sample],
    candidates: &[usize],
    budget: usize,
) -> Vec<usize> {
    let s = emcm_scores(f, f_scores, committee, samples);
    top_by_score(candidates, committee.sample_ids(), &s, budget)
}

/// Trains the residual predictor: half the hidden width of `f`, fitted to
/// `|f(x) - mos(x)|` over the labeled set.
pub fn train_residual_model(f: &Model, labeled: &[Example], cfg: &TrainConfig) -> Result<Model> {
    if labeled.is_empty() {
        return Err(Error::invalid("residual model needs labeled data"));
    }
    let mut widths = vec![f.input_dim()];
    widths.extend(f.widths[1..f.widths.len() - 1].iter().map(|w| (w / 2).max(1)));
    widths.push(1);
    let init = Model::init(&widths, rng::derive(cfg.seed, "rsal/init"))?;
    let targets: Vec<Example> = labeled
        .iter()
        .map(|e| Example {
            features: e.features,
            target: (f.predict_mos(e.features) - e.target).abs(),
        })
        .collect();
    let (mut aux, _) = model::train(&init, &targets, cfg)?;
    aux.id = format!("{}-residual", f.id);
    Ok(aux)
}

/// Largest predicted residual first.
pub fn select_rsal(aux: &Model, samples: &[Sample], candidates: &[usize], budget: usize) -> Vec<usize> {
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let pred: Vec<f64> = samples.iter().map(|s| aux.readout(&s.features)).collect();
    top_by_score(candidates, &ids, &pred, budget)
}

/// Coordinates for greedy sampling: standardized features joined with the
/// standardized model output. Statistics are taken over the candidates in
/// id order.
pub fn joint_space(samples: &[Sample], f_scores: &[f64], candidates: &[usize]) -> Vec<Vec<f64>> {
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let order = by_id(candidates, &ids);
    let raw: Vec<Vec<f64>> = samples
        .iter()
        .zip(f_scores)
        .map(|(s, f)| {
            let mut v = s.features.clone();
            v.push(*f);
            v
        })
        .collect();
    let dim = raw.first().map_or(0, Vec::len);
    let n = order.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for &i in &order {
        for (m, v) in mean.iter_mut().zip(&raw[i]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut sd = vec![0.0; dim];
    for &i in &order {
        for ((s, v), m) in sd.iter_mut().zip(&raw[i]).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let sd: Vec<f64> = sd.iter().map(|s| (s / n).sqrt()).collect();
    raw.into_iter()
        .map(|v| {
            v.iter()
                .zip(&mean)
                .zip(&sd)
                .map(|((x, m), s)| if *s > 0.0 { (x - m) / s } else { 0.0 })
                .collect()
        })
        .collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Greedy max-min sampling: start nearest the centroid, then repeatedly
/// add the candidate farthest from everything chosen so far.
pub fn select_gs(points: &[Vec<f64>], ids: &[String], candidates: &[usize], budget: usize) -> Vec<usize> {
    let c = by_id(candidates, ids);
    if c.is_empty() || budget == 0 {
        return Vec::new();
    }
    let dim = points[c[0]].len();
    let mut centroid = vec![0.0; dim];
    for &i in &c {
        for (m, v) in centroid.iter_mut().zip(&points[i]) {
            *m += v;
        }
    }
    centroid.iter_mut().for_each(|m| *m /= c.len() as f64);
    // strict comparisons keep the smallest id among ties, since `c` is id-sorted
    let mut first = c[0];
    let mut best = dist2(&points[first], &centroid);
    for &i in &c[1..] {
        let d = dist2(&points[i], &centroid);
        if d < best {
            best = d;
            first = i;
        }
    }
    let mut chosen = vec![first];
    let mut min_d: Vec<f64> = c.iter().map(|&i| dist2(&points[i], &points[first])).collect();
    let mut taken: HashSet<usize> = HashSet::from([first]);
    while chosen.len() < budget.min(c.len()) {
        let mut pick = None;
        let mut far = f64::NEG_INFINITY;
        for (k, &i) in c.iter().enumerate() {
            if !taken.contains(&i) && min_d[k] > far {
                far = min_d[k];
                pick = Some((k, i));
            }
        }
        let Some((_, i)) = pick else { break };
        chosen.push(i);
        taken.insert(i);
        for (k, &j) in c.iter().enumerate() {
            let d = dist2(&points[j], &points[i]);
            if d < min_d[k] {
                min_d[k] = d;
            }
        }
    }
    chosen
}

/// Both images of each pair, largest objective first, without repeats,
/// cut at `budget`.
pub fn select_gmad(pairs: &[GmadPair], budget: usize) -> Vec<String> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[b].objective.total_cmp(&pairs[a].objective).then(a.cmp(&b)));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for i in order {
        for id in [&pairs[i].x_id, &pairs[i].y_id] {
            if out.len() < budget && seen.insert(id.clone()) {
                out.push(id.clone());
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub selector: String,
    pub srcc: f64,
    pub plcc: f64,
    pub budget: usize,
    pub selected: usize,
    pub seed: u64,
}

/// Correlation between `f`'s predictions and the reference MOS on the
/// selected samples.
pub fn subset_correlation(pred: &[f64], mos: &[f64], selected: &[usize]) -> Result<Correlation> {
    let p: Vec<f64> = selected.iter().map(|&i| pred[i]).collect();
    let m: Vec<f64> = selected.iter().map(|&i| mos[i]).collect();
    Correlation::of(&p, &m)
}
