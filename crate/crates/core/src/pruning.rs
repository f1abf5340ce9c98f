//! Self-competitor construction: six pruning criteria, the Weiszfeld
//! geometric median used by FPGM, and the fine-tuned pruned pool.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::srcc;
use crate::model::{self, fit_scale_map, Example, Lineage, Model, TrainConfig};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Criterion {
    #[serde(rename = "omp")]
    Omp,
    #[serde(rename = "l1-filter")]
    L1Filter,
    #[serde(rename = "l2-filter")]
    L2Filter,
    #[serde(rename = "taylor-fo")]
    TaylorFo,
    #[serde(rename = "slimming")]
    Slimming,
    #[serde(rename = "fpgm")]
    Fpgm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    Weight,
    Unit,
}

impl Criterion {
    pub const ALL: [Criterion; 6] = [
        Criterion::Omp,
        Criterion::L1Filter,
        Criterion::L2Filter,
        Criterion::TaylorFo,
        Criterion::Slimming,
        Criterion::Fpgm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Omp => "omp",
            Criterion::L1Filter => "l1-filter",
            Criterion::L2Filter => "l2-filter",
            Criterion::TaylorFo => "taylor-fo",
            Criterion::Slimming => "slimming",
            Criterion::Fpgm => "fpgm",
        }
    }

    pub fn parse(name: &str) -> Result<Criterion> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::invalid(format!("unknown pruning criterion `{name}`")))
    }

    pub fn granularity(self) -> Granularity {
        match self {
            Criterion::Omp => Granularity::Weight,
            _ => Granularity::Unit,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub criterion: Criterion,
    pub ratio: f64,
}

impl PruneSpec {
    pub fn new(criterion: Criterion, ratio: f64) -> Result<Self> {
        let s = PruneSpec { criterion, ratio };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::invalid(format!("pruning ratio {} not in (0, 1)", self.ratio)));
        }
        Ok(())
    }

    pub fn granularity(&self) -> Granularity {
        self.criterion.granularity()
    }

    pub fn member_id(&self) -> String {
        format!("h-{}-{:.2}", self.criterion.name(), self.ratio)
    }
}

/// Number of weights OMP masks: `floor(ratio * prunable)`, where the
/// prunable set is every weight outside the output layer.
pub fn weight_budget(model: &Model, ratio: f64) -> usize {
    (ratio * omp_prunable(model) as f64).floor() as usize
}

fn omp_prunable(model: &Model) -> usize {
    let last = model.layers.len() - 1;
    model.layers[..last].iter().map(|l| l.weights.len()).sum()
}

/// Units masked per hidden layer, capped so no layer is emptied.
pub fn unit_budget(units: usize, ratio: f64) -> usize {
    ((ratio * units as f64).floor() as usize).min(units.saturating_sub(1))
}

/// `(|w|, layer, flat index)` for every weight outside the output layer.
pub fn omp_scores(model: &Model) -> Vec<(f64, usize, usize)> {
    let last = model.layers.len() - 1;
    model.layers[..last]
        .iter()
        .enumerate()
        .flat_map(|(li, l)| l.weights.iter().enumerate().map(move |(k, w)| (w.abs(), li, k)))
        .collect()
}

/// Per hidden layer, one importance score per unit; lower is pruned first.
pub fn unit_scores(model: &Model, criterion: Criterion, batch: Option<&[Example]>) -> Result<Vec<(usize, Vec<f64>)>> {
    let hidden: Vec<usize> = model.hidden_layers().map(|(li, _)| li).collect();
    match criterion {
        Criterion::Omp => Err(Error::invalid("OMP is weight-granular")),
        Criterion::L1Filter | Criterion::L2Filter => Ok(hidden
            .iter()
            .map(|&li| {
                let l = &model.layers[li];
                let s = (0..l.out_dim)
                    .map(|u| {
                        let row = l.row(u);
                        if criterion == Criterion::L1Filter {
                            row.iter().map(|w| w.abs()).sum()
                        } else {
                            row.iter().map(|w| w * w).sum::<f64>().sqrt()
                        }
                    })
                    .collect();
                (li, s)
            })
            .collect()),
        Criterion::Slimming => Ok(hidden
            .iter()
            .map(|&li| (li, model.layers[li].gamma.iter().map(|g| g.abs()).collect()))
            .collect()),
        Criterion::TaylorFo => {
            let batch = batch
                .filter(|b| !b.is_empty())
                .ok_or_else(|| Error::invalid("TaylorFO pruning needs a labeled batch"))?;
            let slots = model.gamma_slots();
            let mut out: Vec<(usize, Vec<f64>)> = hidden
                .iter()
                .map(|&li| (li, vec![0.0; model.layers[li].out_dim]))
                .collect();
            for i in 0..batch.len() {
                let (_, g) = model.loss_gradient(batch, &[i]);
                for ((li, k), (_, acc)) in slots.iter().zip(out.iter_mut()) {
                    for (u, a) in acc.iter_mut().enumerate() {
                        let t = model.layers[*li].gamma[u] * g[*k][u];
                        *a += t * t;
                    }
                }
            }
            Ok(out)
        }
        Criterion::Fpgm => hidden
            .iter()
            .map(|&li| {
                let l = &model.layers[li];
                let rows: Vec<Vec<f64>> = (0..l.out_dim).map(|u| l.row(u).to_vec()).collect();
                let median = geometric_median(&rows, 1e-10)?;
                Ok((li, rows.iter().map(|r| euclid(r, &median)).collect()))
            })
            .collect(),
    }
}

/// Applies `spec` to a copy of `model`, recording the spec in its lineage.
///
/// Slimming reads the current `gamma`; the l1 warm-up happens in
/// [`build_pruned_pool`].
pub fn prune(model: &Model, spec: &PruneSpec, batch: Option<&[Example]>) -> Result<Model> {
    spec.validate()?;
    let mut out = model.clone();
    match spec.granularity() {
        Granularity::Weight => {
            let mut scores = omp_scores(model);
            scores.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            for &(_, li, k) in scores.iter().take(weight_budget(model, spec.ratio)) {
                out.layers[li].weight_mask[k] = 0;
            }
            out.apply_masks();
        }
        Granularity::Unit => {
            for (li, s) in unit_scores(model, spec.criterion, batch)? {
                for u in lowest(&s, unit_budget(s.len(), spec.ratio)) {
                    out.mask_unit(li, u);
                }
            }
        }
    }
    out.id = spec.member_id();
    out.lineage = Lineage {
        parent: Some(model.id.clone()),
        criterion: Some(spec.criterion),
        ratio: Some(spec.ratio),
        round: model.lineage.round,
    };
    Ok(out)
}

/// Indices of the `count` smallest scores, ties by index.
fn lowest(scores: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Sum of Euclidean distances from `y` to `points`.
pub fn distance_sum(points: &[Vec<f64>], y: &[f64]) -> f64 {
    points.iter().map(|p| euclid(p, y)).sum()
}

/// Weiszfeld iteration with the Vardi-Zhang step at data points.
///
/// The result is never worse than the best input point.
pub fn geometric_median(points: &[Vec<f64>], tol: f64) -> Result<Vec<f64>> {
    let first = points
        .first()
        .ok_or_else(|| Error::invalid("geometric median of an empty set"))?;
    let dim = first.len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("points of unequal dimension"));
    }
    let n = points.len() as f64;
    let mut y: Vec<f64> = (0..dim).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    let scale = points.iter().map(|p| euclid(p, &y)).fold(0.0, f64::max).max(1e-300);
    let coincide = 1e-12 * scale;
    for _ in 0..100_000 {
        let mut num = vec![0.0; dim];
        let mut den = 0.0;
        let mut eta = 0.0;
        let mut pull = vec![0.0; dim];
        for p in points {
            let d = euclid(p, &y);
            if d <= coincide {
                eta += 1.0;
                continue;
            }
            den += 1.0 / d;
            for j in 0..dim {
                num[j] += p[j] / d;
                pull[j] += (p[j] - y[j]) / d;
            }
        }
        if den == 0.0 {
            break;
        }
        let t: Vec<f64> = num.iter().map(|v| v / den).collect();
        let next: Vec<f64> = if eta == 0.0 {
            t
        } else {
            let r = pull.iter().map(|v| v * v).sum::<f64>().sqrt();
            if r <= eta {
                break;
            }
            let a = 1.0 - eta / r;
            t.iter().zip(&y).map(|(t, y)| a * t + (1.0 - a) * y).collect()
        };
        let step = euclid(&next, &y);
        y = next;
        if step <= tol * scale {
            break;
        }
    }
    let best = points
        .iter()
        .min_by(|a, b| distance_sum(points, a).total_cmp(&distance_sum(points, b)))
        .expect("nonempty");
    if distance_sum(points, best) < distance_sum(points, &y) {
        y = best.clone();
    }
    Ok(y)
}

/// Settings for building the pruned pool.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolConfig {
    pub finetune: TrainConfig,
    pub slimming_warmup_epochs: usize,
    pub slimming_l1: f64,
    /// Examples drawn from D for TaylorFO importance.
    pub taylor_batch: usize,
    /// Members whose SRCC on D falls below this are flagged.
    pub srcc_floor: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            finetune: TrainConfig {
                max_epochs: 10,
                ..TrainConfig::default()
            },
            slimming_warmup_epochs: 3,
            slimming_l1: 1e-3,
            taylor_batch: 256,
            srcc_floor: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PoolMember {
    pub model: Model,
    pub spec: PruneSpec,
    pub srcc_on_d: f64,
    pub flagged: bool,
}

/// Prunes `f` under every (criterion, ratio), criterion-major, fine-tunes
/// each member with its mask frozen, and refits each member's scale map
/// on `train`.
pub fn build_pruned_pool(
    f: &Model,
    criteria: &[Criterion],
    ratios: &[f64],
    train: &[Example],
    cfg: &PoolConfig,
) -> Result<Vec<PoolMember>> {
    if train.is_empty() {
        return Err(Error::invalid("pruned pool needs a non-empty training set"));
    }
    let base_seed = cfg.finetune.seed;
    let mut taylor_rng = rng::stream(base_seed, "pool/taylor-batch");
    let take = cfg.taylor_batch.clamp(1, train.len());
    let mut picks = sample_indices(&mut taylor_rng, train.len(), take).into_vec();
    picks.sort_unstable();
    let taylor: Vec<Example> = picks.into_iter().map(|i| train[i]).collect();
    let mut warmed = None;
    let mut out = Vec::with_capacity(criteria.len() * ratios.len());
    for &criterion in criteria {
        for &ratio in ratios {
            let spec = PruneSpec::new(criterion, ratio)?;
            let source = if criterion == Criterion::Slimming {
                if warmed.is_none() {
                    let warm_cfg = TrainConfig {
                        max_epochs: cfg.slimming_warmup_epochs,
                        l1_gamma: cfg.slimming_l1,
                        seed: rng::derive(base_seed, "pool/slimming-warmup"),
                        ..cfg.finetune.clone()
                    };
                    warmed = Some(model::train(f, train, &warm_cfg)?.0);
                }
                warmed.as_ref().expect("warmed")
            } else {
                f
            };
            let pruned = prune(source, &spec, Some(&taylor))?;
            let member_cfg = TrainConfig {
                seed: rng::derive(base_seed, &format!("pool/{}", spec.member_id())),
                ..cfg.finetune.clone()
            };
            let (mut h, _) = model::train(&pruned, train, &member_cfg)?;
            h.id = spec.member_id();
            h.lineage = pruned.lineage.clone();
            calibrate(&mut h, train)?;
            let preds: Vec<f64> = train.iter().map(|e| h.predict_mos(e.features)).collect();
            let targets: Vec<f64> = train.iter().map(|e| e.target).collect();
            let srcc_on_d = srcc(&preds, &targets).unwrap_or(0.0);
            out.push(PoolMember {
                model: h,
                spec,
                srcc_on_d,
                flagged: srcc_on_d < cfg.srcc_floor,
            });
        }
    }
    Ok(out)
}

/// Refits `model`'s scale map from its raw outputs on `data`.
pub fn calibrate(model: &mut Model, data: &[Example]) -> Result<()> {
    let raw: Vec<f64> = data.iter().map(|e| model.forward(e.features)).collect();
    let mos: Vec<f64> = data.iter().map(|e| e.target).collect();
    model.scale_map = fit_scale_map(&raw, &mos)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: String,
    pub path: String,
    pub spec: PruneSpec,
    pub srcc_on_d: f64,
    pub flagged: bool,
}

/// Writes each member to `dir/<id>.json` and the ordered manifest to
/// `dir/pool.json`.
pub fn save_pool(dir: &Path, pool: &[PoolMember]) -> Result<Vec<PoolEntry>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(pool.len());
    for m in pool {
        let file = format!("{}.json", m.model.id);
        m.model.save(&dir.join(&file))?;
        entries.push(PoolEntry {
            id: m.model.id.clone(),
            path: file,
            spec: m.spec,
            srcc_on_d: m.srcc_on_d,
            flagged: m.flagged,
        });
    }
    crate::io::write_json(&dir.join("pool.json"), &entries)?;
    Ok(entries)
}

/// Loads the members listed in `dir/pool.json`, in manifest order.
pub fn load_pool(dir: &Path) -> Result<Vec<Model>> {
    let entries: Vec<PoolEntry> = crate::io::read_json(&dir.join("pool.json"))?;
    entries.iter().map(|e| Model::load(&dir.join(&e.path))).collect()
}
