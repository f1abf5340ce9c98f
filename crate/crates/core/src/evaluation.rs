//! Correlation metrics, model-vs-model tournaments and the global
//! aggressiveness/resistance ranking.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datapool::LabeledSet;
use crate::error::{Error, Result};
use crate::gmad::{partition_levels, select_pairs, GmadPair, QualityLevel};

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::invalid("correlation needs at least two points"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in correlation input"));
    }
    Ok(())
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::invalid("correlation of a constant vector"));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation.
pub fn srcc(pred: &[f64], mos: &[f64]) -> Result<f64> {
    check_pair(pred, mos)?;
    pearson(&average_ranks(pred), &average_ranks(mos))
}

/// Pearson linear correlation.
pub fn plcc(pred: &[f64], mos: &[f64]) -> Result<f64> {
    check_pair(pred, mos)?;
    pearson(pred, mos)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub srcc: f64,
    pub plcc: f64,
}

impl Correlation {
    pub fn of(pred: &[f64], mos: &[f64]) -> Result<Self> {
        Ok(Correlation {
            srcc: srcc(pred, mos)?,
            plcc: plcc(pred, mos)?,
        })
    }
}

/// Round-robin gMAD games between `models` (id, scores over
/// `sample_ids`). Every unordered pair competes at every level with
/// `pairs_per_level` pairs split across the two role assignments.
pub fn tournament(
    models: &[(String, Vec<f64>)],
    sample_ids: &[String],
    eligible: Option<&[bool]>,
    levels: &[QualityLevel],
    pairs_per_level: usize,
    round: usize,
) -> Vec<GmadPair> {
    let mut out = Vec::new();
    for a in 0..models.len() {
        for b in a + 1..models.len() {
            for level in levels {
                let roles = [
                    (&models[a], &models[b], pairs_per_level.div_ceil(2)),
                    (&models[b], &models[a], pairs_per_level / 2),
                ];
                for ((att_id, att), (def_id, def), k) in roles {
                    let cands = &partition_levels(def, levels, eligible)[level.index];
                    for s in select_pairs(def, att, cands, sample_ids, k) {
                        let (x, y) = (&sample_ids[s.x], &sample_ids[s.y]);
                        out.push(GmadPair {
                            pair_id: crate::gmad::pair_id(round, att_id, def_id, level.index, x, y),
                            x_id: x.clone(),
                            y_id: y.clone(),
                            attacker: att_id.clone(),
                            defender: def_id.clone(),
                            level: level.index,
                            k_rank: s.k_rank,
                            objective: s.objective,
                            round,
                        });
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub models: Vec<String>,
    /// Standardized; higher exposes others more.
    pub aggressiveness: Vec<f64>,
    /// Standardized; higher survives attacks better.
    pub resistance: Vec<f64>,
    pub raw_aggressiveness: Vec<f64>,
    pub raw_resistance: Vec<f64>,
    /// Mean signed gap per (attacker, defender); `None` on the diagonal
    /// and for unplayed games.
    pub gaps: Vec<Vec<Option<f64>>>,
    pub unlabeled_pairs: usize,
}

/// Aggregates rated games: the gap `(mos(x) - mos(y)) / 100` credits the
/// attacker and debits the defender; per-role means are standardized
/// across models (zero-variance vectors map to zeros).
pub fn global_ranking(pairs: &[GmadPair], labels: &LabeledSet, models: &[String]) -> Result<RankingResult> {
    let pos: BTreeMap<&str, usize> = models.iter().enumerate().map(|(i, m)| (m.as_str(), i)).collect();
    let n = models.len();
    let mut agg = vec![(0.0, 0usize); n];
    let mut res = vec![(0.0, 0usize); n];
    let mut cell = vec![vec![(0.0, 0usize); n]; n];
    let mut unlabeled = 0;
    for p in pairs {
        let a = *pos
            .get(p.attacker.as_str())
            .ok_or_else(|| Error::UnknownModel(p.attacker.clone()))?;
        let d = *pos
            .get(p.defender.as_str())
            .ok_or_else(|| Error::UnknownModel(p.defender.clone()))?;
        let (Some(mx), Some(my)) = (labels.mos(&p.x_id), labels.mos(&p.y_id)) else {
            unlabeled += 1;
            continue;
        };
        let gap = (mx - my) / 100.0;
        agg[a].0 += gap;
        agg[a].1 += 1;
        res[d].0 -= gap;
        res[d].1 += 1;
        cell[a][d].0 += gap;
        cell[a][d].1 += 1;
    }
    let mean = |(s, c): (f64, usize)| if c == 0 { 0.0 } else { s / c as f64 };
    let raw_aggressiveness: Vec<f64> = agg.into_iter().map(mean).collect();
    let raw_resistance: Vec<f64> = res.into_iter().map(mean).collect();
    let gaps = cell
        .into_iter()
        .enumerate()
        .map(|(a, row)| {
            row.into_iter()
                .enumerate()
                .map(|(d, c)| (a != d && c.1 > 0).then(|| mean(c)))
                .collect()
        })
        .collect();
    Ok(RankingResult {
        models: models.to_vec(),
        aggressiveness: standardize(&raw_aggressiveness),
        resistance: standardize(&raw_resistance),
        raw_aggressiveness,
        raw_resistance,
        gaps,
        unlabeled_pairs: unlabeled,
    })
}

/// Zero mean, unit population variance; constant vectors become zeros.
pub fn standardize(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    if var <= 1e-24 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - m) / var.sqrt()).collect()
}
