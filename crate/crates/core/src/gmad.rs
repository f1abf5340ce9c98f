//! Level-constrained gMAD pair selection.
//!
//! For a defender `D` and attacker `A`, the pair objective
//! `(A(x) - A(y)) - (D(x) - D(y))` equals `d(x) - d(y)` with
//! `d = A - D`, so the best pair inside a level is the sample with the
//! largest `d` against the sample with the smallest `d`. Repeating on the
//! remaining samples yields the top-k pairs.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scores::ScoreMatrix;

pub const LEVEL_LABELS: [&str; 5] = ["bad", "poor", "fair", "good", "excellent"];

/// A MOS interval `[lower, upper)`; the top level also contains `upper`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityLevel {
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
    pub label: String,
}

/// `count` equal-width levels over `[0, 100]`.
pub fn uniform_levels(count: usize) -> Result<Vec<QualityLevel>> {
    if count == 0 {
        return Err(Error::invalid("at least one quality level is required"));
    }
    let w = 100.0 / count as f64;
    Ok((0..count)
        .map(|i| QualityLevel {
            index: i,
            lower: w * i as f64,
            upper: if i + 1 == count { 100.0 } else { w * (i + 1) as f64 },
            label: if count == LEVEL_LABELS.len() {
                LEVEL_LABELS[i].to_string()
            } else {
                format!("level-{i}")
            },
        })
        .collect())
}

/// The level holding `score`; scores outside `[0, 100]` fall into the
/// nearest end level.
pub fn level_of(score: f64, levels: &[QualityLevel]) -> usize {
    levels.iter().position(|l| score < l.upper).unwrap_or(levels.len() - 1)
}

/// Sample positions per level, each list ascending. Only positions with
/// `eligible[i]` set are placed.
pub fn partition_levels(defender: &[f64], levels: &[QualityLevel], eligible: Option<&[bool]>) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); levels.len()];
    for (i, s) in defender.iter().enumerate() {
        if eligible.is_none_or(|e| e[i]) {
            out[level_of(*s, levels)].push(i);
        }
    }
    out
}

/// One selected pair, by position in the score matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    pub x: usize,
    pub y: usize,
    pub k_rank: usize,
    pub objective: f64,
}

/// The top-`k` pairs among `candidates` with the defender held inside a
/// level. Ties prefer the lexicographically smaller sample id. Returns
/// fewer than `k` pairs when fewer than `2k` candidates exist.
pub fn select_pairs(
    defender: &[f64],
    attacker: &[f64],
    candidates: &[usize],
    sample_ids: &[String],
    k: usize,
) -> Vec<Selection> {
    let d = |i: usize| attacker[i] - defender[i];
    let mut desc = candidates.to_vec();
    desc.sort_by(|&a, &b| d(b).total_cmp(&d(a)).then_with(|| sample_ids[a].cmp(&sample_ids[b])));
    let mut asc = candidates.to_vec();
    asc.sort_by(|&a, &b| d(a).total_cmp(&d(b)).then_with(|| sample_ids[a].cmp(&sample_ids[b])));
    let mut used = HashSet::new();
    let (mut hi, mut lo) = (0, 0);
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        while hi < desc.len() && used.contains(&desc[hi]) {
            hi += 1;
        }
        let Some(&x) = desc.get(hi) else { break };
        while lo < asc.len() && (used.contains(&asc[lo]) || asc[lo] == x) {
            lo += 1;
        }
        let Some(&y) = asc.get(lo) else { break };
        used.insert(x);
        used.insert(y);
        out.push(Selection {
            x,
            y,
            k_rank: out.len() + 1,
            objective: d(x) - d(y),
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmadPair {
    pub pair_id: String,
    /// The image the attacker claims is better.
    pub x_id: String,
    pub y_id: String,
    pub attacker: String,
    pub defender: String,
    pub level: usize,
    pub k_rank: usize,
    pub objective: f64,
    pub round: usize,
}

pub fn pair_id(round: usize, attacker: &str, defender: &str, level: usize, x: &str, y: &str) -> String {
    rng::digest_hex(&[&round.to_string(), attacker, defender, &level.to_string(), x, y], 16)
}

impl GmadPair {
    fn from_selection(
        s: &Selection,
        ids: &[String],
        attacker: &str,
        defender: &str,
        level: usize,
        round: usize,
    ) -> Self {
        let (x, y) = (&ids[s.x], &ids[s.y]);
        GmadPair {
            pair_id: pair_id(round, attacker, defender, level, x, y),
            x_id: x.clone(),
            y_id: y.clone(),
            attacker: attacker.to_string(),
            defender: defender.to_string(),
            level,
            k_rank: s.k_rank,
            objective: s.objective,
            round,
        }
    }

    /// The objective with the two roles exchanged.
    pub fn swapped_objective(&self, scores: &ScoreMatrix) -> Result<f64> {
        let a = scores.row_by_id(&self.attacker)?;
        let d = scores.row_by_id(&self.defender)?;
        let xi = scores
            .sample_position(&self.x_id)
            .ok_or_else(|| Error::UnknownSample(self.x_id.clone()))?;
        let yi = scores
            .sample_position(&self.y_id)
            .ok_or_else(|| Error::UnknownSample(self.y_id.clone()))?;
        Ok((d[xi] - d[yi]) - (a[xi] - a[yi]))
    }
}

/// Which side of the target model a pair was drawn for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    /// An ensemble attacks, the target defends.
    EnsembleAttacks,
    /// The target attacks, an ensemble defends.
    TargetAttacks,
}

impl Role {
    pub const BOTH: [Role; 2] = [Role::EnsembleAttacks, Role::TargetAttacks];

    pub fn of(pair: &GmadPair, target: &str) -> Role {
        if pair.attacker == target {
            Role::TargetAttacks
        } else {
            Role::EnsembleAttacks
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuplicatePair {
    pub pair_id: String,
    pub kept_pair_id: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GmadSet {
    pub pairs: Vec<GmadPair>,
    pub duplicates: Vec<DuplicatePair>,
    pub warnings: Vec<String>,
}

impl GmadSet {
    /// Distinct image ids in first-appearance order.
    pub fn images(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for p in &self.pairs {
            for id in [&p.x_id, &p.y_id] {
                if seen.insert(id.as_str()) {
                    out.push(id.clone());
                }
            }
        }
        out
    }
}

/// Inputs to [`assemble_gmad_set`].
pub struct GmadRequest<'a> {
    pub target: &'a str,
    /// Target scores over the matrix samples.
    pub target_scores: &'a [f64],
    pub ensembles: &'a ScoreMatrix,
    /// Samples that may be selected; `None` admits all.
    pub eligible: Option<&'a [bool]>,
    pub levels: &'a [QualityLevel],
    pub k: usize,
    pub round: usize,
    pub budget: Option<usize>,
}

/// Runs every (ensemble, level, role) competition, drops repeated image
/// pairs (first occurrence wins) and applies the optional budget.
pub fn assemble_gmad_set(req: &GmadRequest) -> Result<GmadSet> {
    let ids = req.ensembles.sample_ids();
    if req.target_scores.len() != ids.len() {
        return Err(Error::invalid("target scores do not cover the ensemble samples"));
    }
    if req.eligible.is_some_and(|e| e.len() != ids.len()) {
        return Err(Error::invalid("eligibility mask length mismatch"));
    }
    let mut set = GmadSet::default();
    let mut seen: HashMap<(String, String), String> = HashMap::new();
    let f_levels = partition_levels(req.target_scores, req.levels, req.eligible);
    for (e, g_id) in req.ensembles.model_ids().iter().enumerate() {
        let g = req.ensembles.row(e);
        let g_levels = partition_levels(g, req.levels, req.eligible);
        for level in req.levels {
            for role in Role::BOTH {
                let (att, def, att_id, def_id, cands) = match role {
                    Role::EnsembleAttacks => (g, req.target_scores, g_id.as_str(), req.target, &f_levels[level.index]),
                    Role::TargetAttacks => (req.target_scores, g, req.target, g_id.as_str(), &g_levels[level.index]),
                };
                let picks = select_pairs(def, att, cands, ids, req.k);
                if picks.len() < req.k {
                    set.warnings.push(format!(
                        "{att_id} attacking {def_id} at level {}: {} candidates, {} of {} pairs",
                        level.index,
                        cands.len(),
                        picks.len(),
                        req.k
                    ));
                }
                for s in &picks {
                    let pair = GmadPair::from_selection(s, ids, att_id, def_id, level.index, req.round);
                    let key = if pair.x_id < pair.y_id {
                        (pair.x_id.clone(), pair.y_id.clone())
                    } else {
                        (pair.y_id.clone(), pair.x_id.clone())
                    };
                    if let Some(kept) = seen.get(&key) {
                        set.duplicates.push(DuplicatePair {
                            pair_id: pair.pair_id,
                            kept_pair_id: kept.clone(),
                        });
                    } else {
                        seen.insert(key, pair.pair_id.clone());
                        set.pairs.push(pair);
                    }
                }
            }
        }
    }
    if let Some(b) = req.budget {
        set.pairs = apply_budget(&set.pairs, req.target, b);
    }
    Ok(set)
}

/// Keeps `min(budget, |pairs|)` pairs spread evenly over (level, role)
/// strata, largest objective first within each stratum. Strata that run
/// short hand their quota to the others. Survivors keep their order.
pub fn apply_budget(pairs: &[GmadPair], target: &str, budget: usize) -> Vec<GmadPair> {
    let mut strata: BTreeMap<(usize, Role), Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        strata.entry((p.level, Role::of(p, target))).or_default().push(i);
    }
    for idx in strata.values_mut() {
        idx.sort_by(|&a, &b| pairs[b].objective.total_cmp(&pairs[a].objective).then(a.cmp(&b)));
    }
    let mut quota: Vec<usize> = vec![0; strata.len()];
    let sizes: Vec<usize> = strata.values().map(Vec::len).collect();
    let mut left = budget.min(pairs.len());
    while left > 0 {
        let open: Vec<usize> = (0..sizes.len()).filter(|&s| quota[s] < sizes[s]).collect();
        let share = (left / open.len()).max(1);
        for s in open {
            if left == 0 {
                break;
            }
            let add = share.min(sizes[s] - quota[s]).min(left);
            quota[s] += add;
            left -= add;
        }
    }
    let mut keep: Vec<usize> = strata
        .values()
        .zip(&quota)
        .flat_map(|(idx, q)| idx[..*q].iter().copied())
        .collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| pairs[i].clone()).collect()
}
