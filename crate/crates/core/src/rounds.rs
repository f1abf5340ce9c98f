//! The troubleshooting loop over a run directory.
//!
//! ```text
//! run.json
//! data/{pool,train,probe}.jsonl, data/{train,probe}_labels.jsonl
//! rounds/0/models/            f.json, pool.json, h-*.json
//! rounds/<t>/                 ensembles.jsonl, pairs.jsonl, ratings.jsonl,
//!                             labels.jsonl, cases.csv, metrics.json, models/
//! tournament/                 pairs.jsonl, ratings.jsonl, labels.jsonl, ranking.json
//! ablation.csv, report.md
//! ```
//!
//! Every stage persists its outputs and reads its inputs back from disk, so
//! stages can be run one at a time or all at once with identical results.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::config::{Backend, RunConfig};
use crate::datapool::{BiasSpec, LabelRole, LabeledSet, Sample, World};
use crate::ensemble::{ensemble_scores, sample_ensembles, EnsembleSpec};
use crate::error::{Error, Result};
use crate::evaluation::{global_ranking, srcc, tournament, Correlation, RankingResult};
use crate::gmad::{assemble_gmad_set, GmadPair, GmadRequest, GmadSet, Role};
use crate::io;
use crate::model::{fit_with_plan, resolve_examples, Example, Model, TrainConfig};
use crate::pruning::{build_pruned_pool, calibrate, load_pool, save_pool, PoolEntry};
use crate::rng;
use crate::scores::ScoreMatrix;
use crate::subjective::{
    classify_pairs, compute_mos, reject_outliers, run_oracle_study, simulated_panel, sort_records, study_progress,
    CaseLabel, CaseRecord, RatingRecord, StudyPlan, StudyProgress, SubjectProfile,
};

pub const TARGET_ID: &str = "f";

#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("run.json")
    }
    pub fn data(&self, file: &str) -> PathBuf {
        self.root.join("data").join(file)
    }
    pub fn round(&self, t: usize) -> PathBuf {
        self.root.join("rounds").join(t.to_string())
    }
    pub fn round_file(&self, t: usize, file: &str) -> PathBuf {
        self.round(t).join(file)
    }
    pub fn models(&self, t: usize) -> PathBuf {
        self.round(t).join("models")
    }
    pub fn tournament(&self, file: &str) -> PathBuf {
        self.root.join("tournament").join(file)
    }
    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.md")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
}

/// Creates or reopens a run directory. Reopening with a configuration
/// whose hash differs from the recorded one is a configuration error.
pub fn open_run(root: &Path, cfg: &RunConfig) -> Result<RunPaths> {
    cfg.validate()?;
    let paths = RunPaths::new(root);
    let manifest = paths.manifest();
    if manifest.exists() {
        let m: RunManifest = io::read_json(&manifest)?;
        if m.config_hash != cfg.hash() {
            return Err(Error::Config(format!(
                "configuration drift: {} was created with config {}, got {}",
                root.display(),
                m.config_hash,
                cfg.hash()
            )));
        }
    } else {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        io::write_json(
            &manifest,
            &RunManifest {
                config_hash: cfg.hash(),
                seed: cfg.seed,
                config: cfg.clone(),
            },
        )?;
    }
    Ok(paths)
}

/// Reopens an existing run with its recorded configuration.
pub fn load_run(root: &Path) -> Result<(RunPaths, RunConfig)> {
    let paths = RunPaths::new(root);
    let m: RunManifest = io::read_json(&paths.manifest())?;
    if m.config.hash() != m.config_hash {
        return Err(Error::Config("run.json config does not match its hash".into()));
    }
    Ok((paths, m.config))
}

/// The three generated pools and their labels.
#[derive(Clone, Debug)]
pub struct WorldData {
    pub pool: Vec<Sample>,
    pub train: Vec<Sample>,
    pub probe: Vec<Sample>,
    pub train_labels: LabeledSet,
    pub probe_labels: LabeledSet,
}

impl WorldData {
    pub fn train_examples(&self) -> Result<Vec<Example<'_>>> {
        resolve_examples(&self.train_labels, &self.train)
    }

    pub fn pool_ids(&self) -> Vec<String> {
        self.pool.iter().map(|s| s.id.clone()).collect()
    }

    /// Exact oracle quality by pool id.
    pub fn pool_quality(&self) -> Result<HashMap<String, f64>> {
        self.pool
            .iter()
            .map(|s| Ok((s.id.clone(), s.true_quality()?)))
            .collect()
    }
}

fn panel(cfg: &RunConfig) -> Result<Vec<SubjectProfile>> {
    simulated_panel(&cfg.panel_config(), rng::derive(cfg.seed, "panel"))
}

/// Generates S, D and the probe set; D is labeled by a simulated study,
/// the probe set by the exact oracle. Existing data is reused.
pub fn synth(paths: &RunPaths, cfg: &RunConfig) -> Result<WorldData> {
    if paths.data("train_labels.jsonl").exists() {
        return load_world(paths);
    }
    let world = World::new(cfg.dim, cfg.world_seed)?;
    let pool = world.synth_pool(
        "s",
        cfg.pool_size,
        rng::derive(cfg.seed, "data/pool"),
        &BiasSpec::Uniform,
    )?;
    let train = world.synth_pool(
        "d",
        cfg.train_size,
        rng::derive(cfg.seed, "data/train"),
        &cfg.train_bias(),
    )?;
    let probe = world.synth_pool(
        "p",
        cfg.probe_size,
        rng::derive(cfg.seed, "data/probe"),
        &BiasSpec::Uniform,
    )?;
    let ids: Vec<String> = train.iter().map(|s| s.id.clone()).collect();
    let quality: HashMap<&str, f64> = train
        .iter()
        .map(|s| Ok((s.id.as_str(), s.true_quality()?)))
        .collect::<Result<_>>()?;
    let records = run_oracle_study(
        &StudyPlan::from_samples(&ids),
        &panel(cfg)?,
        rng::derive(cfg.seed, "study/train"),
        |id| Ok(quality[id]),
    )?;
    let screening = reject_outliers(&records);
    let train_labels = compute_mos(&screening.records, &screening.excluded, LabelRole::TrainD)?;
    let probe_labels = LabeledSet::from_oracle(LabelRole::Probe, &probe)?;
    io::write_manifest(&paths.data("pool.jsonl"), &pool)?;
    io::write_manifest(&paths.data("train.jsonl"), &train)?;
    io::write_manifest(&paths.data("probe.jsonl"), &probe)?;
    io::write_jsonl(&paths.data("train_ratings.jsonl"), &screening.records)?;
    io::write_labels(&paths.data("probe_labels.jsonl"), &probe_labels)?;
    io::write_labels(&paths.data("train_labels.jsonl"), &train_labels)?;
    Ok(WorldData {
        pool,
        train,
        probe,
        train_labels,
        probe_labels,
    })
}

pub fn load_world(paths: &RunPaths) -> Result<WorldData> {
    let need = |f: &str| {
        let p = paths.data(f);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::invalid(format!("{} missing; run `synth` first", p.display())))
        }
    };
    Ok(WorldData {
        pool: io::load_manifest(&need("pool.jsonl")?)?,
        train: io::load_manifest(&need("train.jsonl")?)?,
        probe: io::load_manifest(&need("probe.jsonl")?)?,
        train_labels: io::load_labels(&need("train_labels.jsonl")?, LabelRole::TrainD)?,
        probe_labels: io::load_labels(&need("probe_labels.jsonl")?, LabelRole::Probe)?,
    })
}

/// Trains and calibrates f⁽⁰⁾ on D.
pub fn train_target(paths: &RunPaths, cfg: &RunConfig, world: &WorldData) -> Result<Model> {
    let file = paths.models(0).join("f.json");
    if file.exists() {
        return Model::load(&file);
    }
    let d = world.train_examples()?;
    let init = Model::init(&cfg.widths(), rng::derive(cfg.seed, "init/f"))?;
    let (mut f, _) = crate::model::train(&init, &d, &cfg.train_config(rng::derive(cfg.seed, "train/f")))?;
    f.id = TARGET_ID.to_string();
    calibrate(&mut f, &d)?;
    f.save(&file)?;
    Ok(f)
}

/// Builds the pruned pool from f⁽⁰⁾ and records round-0 metrics.
pub fn prune_stage(paths: &RunPaths, cfg: &RunConfig, world: &WorldData, f: &Model) -> Result<Vec<Model>> {
    let dir = paths.models(0);
    if dir.join("pool.json").exists() {
        return load_pool(&dir);
    }
    let d = world.train_examples()?;
    let members = build_pruned_pool(
        f,
        &cfg.criteria()?,
        &cfg.ratios,
        &d,
        &cfg.pool_config(rng::derive(cfg.seed, "pool")),
    )?;
    let entries = save_pool(&dir, &members)?;
    let pool: Vec<Model> = members.into_iter().map(|m| m.model).collect();
    let metrics = RoundMetrics {
        round: 0,
        probe: probe_correlation(f, world)?,
        train: train_correlation(f, world)?,
        pool: member_metrics(&entries),
        ..RoundMetrics::default()
    };
    io::write_json(&paths.round_file(0, "metrics.json"), &metrics)?;
    Ok(pool)
}

fn member_metrics(entries: &[PoolEntry]) -> Vec<MemberMetrics> {
    entries
        .iter()
        .map(|e| MemberMetrics {
            id: e.id.clone(),
            srcc_on_d: e.srcc_on_d,
            flagged: e.flagged,
        })
        .collect()
}

/// Scores every pool sample with `models` (rows in order).
pub fn score_pool(models: &[Model], samples: &[Sample]) -> Result<ScoreMatrix> {
    ScoreMatrix::from_rows(
        models.iter().map(|m| m.id.clone()).collect(),
        samples.iter().map(|s| s.id.clone()).collect(),
        models.iter().map(|m| m.predict_many(samples)).collect(),
    )
}

/// Models entering round `t`: f⁽ᵗ⁻¹⁾ and the pool after round `t - 1`.
pub fn load_models(paths: &RunPaths, t: usize) -> Result<(Model, Vec<Model>)> {
    let dir = paths.models(t);
    let f = Model::load(&dir.join("f.json"))?;
    Ok((f, load_pool(&dir)?))
}

/// Ids labeled in rounds `1..=upto`.
pub fn labeled_ids(paths: &RunPaths, upto: usize) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for j in 1..=upto {
        let p = paths.round_file(j, "labels.jsonl");
        if p.exists() {
            out.extend(io::load_labels(&p, LabelRole::Gmad(j))?.entries.into_keys());
        }
    }
    Ok(out)
}

fn eligibility(samples: &[Sample], exclude: &BTreeSet<String>) -> Vec<bool> {
    samples.iter().map(|s| !exclude.contains(&s.id)).collect()
}

pub fn ensembles_stage(paths: &RunPaths, cfg: &RunConfig, t: usize) -> Result<Vec<EnsembleSpec>> {
    let file = paths.round_file(t, "ensembles.jsonl");
    if file.exists() {
        return io::read_jsonl(&file);
    }
    let specs = sample_ensembles(
        cfg.pool_members(),
        cfg.ensemble_size,
        cfg.ensembles,
        rng::derive(cfg.seed, &format!("round/{t}/ensembles")),
    )?;
    io::write_jsonl(&file, &specs)?;
    Ok(specs)
}

pub fn load_ensembles(paths: &RunPaths, t: usize) -> Result<Vec<EnsembleSpec>> {
    let p = paths.round_file(t, "ensembles.jsonl");
    if !p.exists() {
        return Err(Error::invalid(format!(
            "{} missing; run `ensembles` first",
            p.display()
        )));
    }
    io::read_jsonl(&p)
}

/// Scores S with f⁽ᵗ⁻¹⁾ and every ensemble of round `t`; writes scores.csv.
pub fn score_stage(paths: &RunPaths, cfg: &RunConfig, world: &WorldData, t: usize) -> Result<ScoreMatrix> {
    let (f, pool) = load_models(paths, t - 1)?;
    let specs = ensembles_stage(paths, cfg, t)?;
    let pool_scores = score_pool(&pool, &world.pool)?;
    let ens = ensemble_scores(&specs, &pool_scores)?;
    let mut ids = vec![f.id.clone()];
    let mut rows = vec![f.predict_many(&world.pool)];
    for m in 0..ens.n_models() {
        ids.push(ens.model_ids()[m].clone());
        rows.push(ens.row(m).to_vec());
    }
    let scores = ScoreMatrix::from_rows(ids, world.pool_ids(), rows)?;
    io::write_scores(&paths.round_file(t, "scores.csv"), &scores)?;
    Ok(scores)
}

pub fn load_round_scores(paths: &RunPaths, t: usize) -> Result<ScoreMatrix> {
    let p = paths.round_file(t, "scores.csv");
    if !p.exists() {
        return Err(Error::invalid(format!("{} missing; run `score` first", p.display())));
    }
    io::load_scores(&p)
}

/// Selects M⁽ᵗ⁾ from a score matrix holding the target row and one row per
/// ensemble id.
pub fn gmad_stage(
    paths: &RunPaths,
    cfg: &RunConfig,
    world: &WorldData,
    t: usize,
    scores: &ScoreMatrix,
    specs: &[EnsembleSpec],
) -> Result<GmadSet> {
    if scores.sample_ids().len() != world.pool.len()
        || scores.sample_ids().iter().zip(&world.pool).any(|(a, s)| *a != s.id)
    {
        return Err(Error::invalid("score matrix samples do not match the pool"));
    }
    let f_row = scores.row_by_id(TARGET_ID)?.to_vec();
    let ens_rows = specs
        .iter()
        .map(|s| scores.row_by_id(&s.id).map(<[f64]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    let ens = ScoreMatrix::from_rows(
        specs.iter().map(|s| s.id.clone()).collect(),
        scores.sample_ids().to_vec(),
        ens_rows,
    )?;
    let eligible = eligibility(&world.pool, &labeled_ids(paths, t - 1)?);
    let levels = cfg.quality_levels();
    let set = assemble_gmad_set(&GmadRequest {
        target: TARGET_ID,
        target_scores: &f_row,
        ensembles: &ens,
        eligible: Some(&eligible),
        levels: &levels,
        k: cfg.k,
        round: t,
        budget: cfg.budget,
    })?;
    io::write_jsonl(&paths.round_file(t, "pairs.jsonl"), &set.pairs)?;
    io::write_jsonl(&paths.round_file(t, "duplicates.jsonl"), &set.duplicates)?;
    io::write_json(&paths.round_file(t, "selection_warnings.json"), &set.warnings)?;
    Ok(set)
}

pub fn load_pairs(paths: &RunPaths, t: usize) -> Result<Vec<GmadPair>> {
    let p = paths.round_file(t, "pairs.jsonl");
    if !p.exists() {
        return Err(Error::invalid(format!("{} missing; run `gmad` first", p.display())));
    }
    io::read_jsonl(&p)
}

/// Outcome of labeling one round.
#[derive(Clone, Debug)]
pub struct LabelOutcome {
    pub labels: LabeledSet,
    pub records: Vec<RatingRecord>,
    pub cases: Vec<CaseRecord>,
    pub unlabeled_pairs: Vec<String>,
    pub excluded: Vec<String>,
    pub rejected_subjects: Vec<String>,
    pub warnings: Vec<String>,
}

/// Collects ratings for M⁽ᵗ⁾ (simulated, or from the live study file),
/// screens them, and writes ratings, labels and cases.
pub fn label_stage(paths: &RunPaths, cfg: &RunConfig, world: &WorldData, t: usize) -> Result<LabelOutcome> {
    let pairs = load_pairs(paths, t)?;
    let plan = StudyPlan::from_pairs(&pairs);
    let ratings_file = paths.round_file(t, "ratings.jsonl");
    let raw = match cfg.backend {
        Backend::Oracle => {
            let quality = world.pool_quality()?;
            run_oracle_study(
                &plan,
                &panel(cfg)?,
                rng::derive(cfg.seed, &format!("study/{t}")),
                |id| {
                    quality
                        .get(id)
                        .copied()
                        .ok_or_else(|| Error::UnknownSample(id.to_string()))
                },
            )?
        }
        Backend::Live => {
            let records: Vec<RatingRecord> = if ratings_file.exists() {
                io::read_jsonl(&ratings_file)?
            } else {
                Vec::new()
            };
            let progress = study_progress(&plan, &records, cfg.subjects);
            if !progress.complete {
                return Err(Error::IncompleteStudy {
                    rated: progress.ratings,
                    required: progress.required,
                });
            }
            records
        }
    };
    finish_labels(paths, cfg, t, &pairs, raw)
}

fn finish_labels(
    paths: &RunPaths,
    cfg: &RunConfig,
    t: usize,
    pairs: &[GmadPair],
    mut raw: Vec<RatingRecord>,
) -> Result<LabelOutcome> {
    sort_records(&mut raw);
    let screening = reject_outliers(&raw);
    let labels = compute_mos(&screening.records, &screening.excluded, LabelRole::Gmad(t))?;
    let (cases, unlabeled) = classify_pairs(pairs, TARGET_ID, &labels, cfg.threshold);
    io::write_jsonl(&paths.round_file(t, "ratings.jsonl"), &screening.records)?;
    io::write_labels(&paths.round_file(t, "labels.jsonl"), &labels)?;
    write_cases(&paths.round_file(t, "cases.csv"), &cases)?;
    Ok(LabelOutcome {
        rejected_subjects: screening
            .subjects
            .iter()
            .filter(|s| s.rejected)
            .map(|s| s.subject_id.clone())
            .collect(),
        labels,
        records: screening.records,
        cases,
        unlabeled_pairs: unlabeled,
        excluded: screening.excluded,
        warnings: screening.warnings,
    })
}

pub fn write_cases(path: &Path, cases: &[CaseRecord]) -> Result<()> {
    let mut s = String::from("pair_id,case\n");
    for c in cases {
        s.push_str(&format!("{},{}\n", c.pair_id, c.case.name()));
    }
    io::write_atomic(path, s.as_bytes())
}

/// Study plan of round `t`, for the live annotation service.
pub fn study_plan(paths: &RunPaths, t: usize) -> Result<StudyPlan> {
    Ok(StudyPlan::from_pairs(&load_pairs(paths, t)?))
}

pub fn live_progress(paths: &RunPaths, cfg: &RunConfig, t: usize) -> Result<StudyProgress> {
    let plan = study_plan(paths, t)?;
    let file = paths.round_file(t, "ratings.jsonl");
    let records: Vec<RatingRecord> = if file.exists() {
        io::read_jsonl(&file)?
    } else {
        Vec::new()
    };
    Ok(study_progress(&plan, &records, cfg.subjects))
}

/// Mini-batches with `ceil(b/2)` positions from D (`0..n_d`) and
/// `floor(b/2)` from L (`n_d..n_d + n_l`). The side needing more batches is
/// walked in shuffled order; the other side is drawn with replacement.
pub fn half_half_batches<R: Rng + ?Sized>(n_d: usize, n_l: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let hd = batch.div_ceil(2);
    let hl = batch / 2;
    if n_d == 0 || n_l == 0 || hl == 0 {
        return Vec::new();
    }
    let steps_d = n_d.div_ceil(hd);
    let steps_l = n_l.div_ceil(hl);
    let steps = steps_d.max(steps_l);
    let walk = |n: usize, per: usize, offset: usize, rng: &mut R| -> Vec<Vec<usize>> {
        let mut order = Vec::with_capacity(steps * per);
        while order.len() < steps * per {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(rng);
            order.extend(p);
        }
        order.truncate(steps * per);
        order
            .chunks(per)
            .map(|c| c.iter().map(|i| i + offset).collect())
            .collect()
    };
    let draw = |n: usize, per: usize, offset: usize, rng: &mut R| -> Vec<Vec<usize>> {
        (0..steps)
            .map(|_| (0..per).map(|_| offset + rng.random_range(0..n)).collect())
            .collect()
    };
    let (d_side, l_side) = if steps_d >= steps_l {
        let d = walk(n_d, hd, 0, rng);
        (d, draw(n_l, hl, n_d, rng))
    } else {
        let l = walk(n_l, hl, n_d, rng);
        (draw(n_d, hd, 0, rng), l)
    };
    d_side
        .into_iter()
        .zip(l_side)
        .map(|(mut a, b)| {
            a.extend(b);
            a
        })
        .collect()
}

/// Jointly fine-tunes `models` on D ∪ L with half/half batches and refits
/// each scale map on D ∪ L. With L empty the models are returned as is.
pub fn rectify(models: &[Model], d: &[Example], l: &[Example], cfg: &TrainConfig) -> Result<Vec<Model>> {
    if l.is_empty() {
        return Ok(models.to_vec());
    }
    let mut data = d.to_vec();
    data.extend_from_slice(l);
    let (n_d, n_l, b) = (d.len(), l.len(), cfg.batch_size);
    models
        .iter()
        .map(|m| {
            let mcfg = TrainConfig {
                seed: rng::derive(cfg.seed, &format!("rectify/{}", m.id)),
                ..cfg.clone()
            };
            let (mut out, _) = fit_with_plan(m, &data, &mcfg, |_, r| half_half_batches(n_d, n_l, b, r))?;
            calibrate(&mut out, &data)?;
            Ok(out)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemberMetrics {
    pub id: String,
    pub srcc_on_d: f64,
    pub flagged: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseCounts {
    #[serde(rename = "I")]
    pub i: usize,
    #[serde(rename = "II")]
    pub ii: usize,
    #[serde(rename = "III")]
    pub iii: usize,
    #[serde(rename = "IV")]
    pub iv: usize,
}

impl CaseCounts {
    pub fn add(&mut self, c: CaseLabel) {
        match c {
            CaseLabel::I => self.i += 1,
            CaseLabel::II => self.ii += 1,
            CaseLabel::III => self.iii += 1,
            CaseLabel::IV => self.iv += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.i + self.ii + self.iii + self.iv
    }

    pub fn get(&self, c: CaseLabel) -> usize {
        match c {
            CaseLabel::I => self.i,
            CaseLabel::II => self.ii,
            CaseLabel::III => self.iii,
            CaseLabel::IV => self.iv,
        }
    }
}

/// Case counts split by which side attacked.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub ensemble_attacks: CaseCounts,
    pub target_attacks: CaseCounts,
}

impl CaseSummary {
    pub fn from_cases(pairs: &[GmadPair], cases: &[CaseRecord]) -> Self {
        let role: HashMap<&str, Role> = pairs
            .iter()
            .map(|p| (p.pair_id.as_str(), Role::of(p, TARGET_ID)))
            .collect();
        let mut s = CaseSummary::default();
        for c in cases {
            match role.get(c.pair_id.as_str()) {
                Some(Role::TargetAttacks) => s.target_attacks.add(c.case),
                Some(Role::EnsembleAttacks) => s.ensemble_attacks.add(c.case),
                None => {}
            }
        }
        s
    }

    /// Share of ensemble attacks that expose f (Cases II and IV).
    pub fn ensemble_success_rate(&self) -> f64 {
        let c = &self.ensemble_attacks;
        ratio(c.ii + c.iv, c.total())
    }

    /// Share of f's attacks that expose the ensemble (Cases III and IV).
    pub fn target_success_rate(&self) -> f64 {
        let c = &self.target_attacks;
        ratio(c.iii + c.iv, c.total())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    pub srcc_on_d_before: f64,
    pub srcc_on_d_after: f64,
    pub violated: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// f⁽ᵗ⁾ on the probe set against exact oracle quality.
    pub probe: Correlation,
    /// f⁽ᵗ⁾ on D.
    pub train: Correlation,
    pub pool: Vec<MemberMetrics>,
    pub pairs: usize,
    pub duplicates: usize,
    pub images: usize,
    pub labeled: usize,
    pub ratings: usize,
    pub ratings_removed: usize,
    pub rejected_subjects: Vec<String>,
    pub excluded_samples: usize,
    pub unlabeled_pairs: usize,
    pub cases: CaseSummary,
    pub ensemble_success_rate: f64,
    pub target_success_rate: f64,
    /// SRCC of f⁽ᵗ⁻¹⁾ and f⁽ᵗ⁾ on this round's new labels.
    pub new_labels_srcc_before: Option<f64>,
    pub new_labels_srcc_after: Option<f64>,
    pub forgetting: Option<Forgetting>,
    pub warnings: Vec<String>,
}

impl Default for Correlation {
    fn default() -> Self {
        Correlation { srcc: 0.0, plcc: 0.0 }
    }
}

fn probe_correlation(f: &Model, world: &WorldData) -> Result<Correlation> {
    let pred = f.predict_many(&world.probe);
    let mos: Vec<f64> = world
        .probe
        .iter()
        .map(|s| {
            world
                .probe_labels
                .mos(&s.id)
                .ok_or_else(|| Error::UnknownSample(s.id.clone()))
        })
        .collect::<Result<_>>()?;
    Correlation::of(&pred, &mos)
}

fn train_correlation(f: &Model, world: &WorldData) -> Result<Correlation> {
    let d = world.train_examples()?;
    correlation_on(f, &d)
}

fn correlation_on(f: &Model, data: &[Example]) -> Result<Correlation> {
    let pred: Vec<f64> = data.iter().map(|e| f.predict_mos(e.features)).collect();
    let mos: Vec<f64> = data.iter().map(|e| e.target).collect();
    Correlation::of(&pred, &mos)
}

/// Union of the labels of rounds `1..=upto`, resolved against the pool.
pub fn gmad_labels(paths: &RunPaths, upto: usize) -> Result<LabeledSet> {
    let mut all = LabeledSet::new(LabelRole::Gmad(upto));
    for j in 1..=upto {
        for (id, e) in io::load_labels(&paths.round_file(j, "labels.jsonl"), LabelRole::Gmad(j))?.entries {
            all.insert(&id, e)?;
        }
    }
    Ok(all)
}

/// Fine-tunes f⁽ᵗ⁻¹⁾ and every pool member on D ∪ L and writes round `t`'s
/// models and metrics.
pub fn rectify_stage(paths: &RunPaths, cfg: &RunConfig, world: &WorldData, t: usize) -> Result<RoundMetrics> {
    let (f_prev, pool_prev) = load_models(paths, t - 1)?;
    let pairs = load_pairs(paths, t)?;
    let new_labels = io::load_labels(&paths.round_file(t, "labels.jsonl"), LabelRole::Gmad(t))?;
    let all_l = gmad_labels(paths, t)?;
    let d = world.train_examples()?;
    let l = resolve_examples(&all_l, &world.pool)?;
    let mut models = vec![f_prev.clone()];
    models.extend(pool_prev.iter().cloned());
    let tuned = rectify(
        &models,
        &d,
        &l,
        &cfg.finetune_config(rng::derive(cfg.seed, &format!("round/{t}/rectify"))),
    )?;
    let f = tuned[0].clone();
    let mut pool: Vec<Model> = tuned[1..].to_vec();
    for m in &mut pool {
        m.lineage.round = t;
    }
    let mut f = f;
    f.lineage.round = t;
    let dir = paths.models(t);
    f.save(&dir.join("f.json"))?;
    let prev_entries: Vec<PoolEntry> = io::read_json(&paths.models(t - 1).join("pool.json"))?;
    let mut entries = Vec::with_capacity(pool.len());
    for (m, e) in pool.iter().zip(&prev_entries) {
        let file = format!("{}.json", m.id);
        m.save(&dir.join(&file))?;
        let srcc_on_d = correlation_on(m, &d).map(|c| c.srcc).unwrap_or(0.0);
        entries.push(PoolEntry {
            id: m.id.clone(),
            path: file,
            spec: e.spec,
            srcc_on_d,
            flagged: srcc_on_d < cfg.srcc_floor,
        });
    }
    io::write_json(&dir.join("pool.json"), &entries)?;

    let records: Vec<RatingRecord> = io::read_jsonl(&paths.round_file(t, "ratings.jsonl"))?;
    let screening_removed = records
        .iter()
        .filter(|r| r.flag != crate::subjective::RatingFlag::Kept)
        .count();
    let (cases, unlabeled) = classify_pairs(&pairs, TARGET_ID, &new_labels, cfg.threshold);
    let summary = CaseSummary::from_cases(&pairs, &cases);
    let new_ex = resolve_examples(&new_labels, &world.pool)?;
    let on_new = |m: &Model| -> Option<f64> {
        let pred: Vec<f64> = new_ex.iter().map(|e| m.predict_mos(e.features)).collect();
        let mos: Vec<f64> = new_ex.iter().map(|e| e.target).collect();
        srcc(&pred, &mos).ok()
    };
    let before = correlation_on(&f_prev, &d)?.srcc;
    let train = correlation_on(&f, &d)?;
    let violated = before - train.srcc > cfg.forget_epsilon;
    let mut warnings: Vec<String> = io::read_json(&paths.round_file(t, "selection_warnings.json")).unwrap_or_default();
    if violated {
        warnings.push(format!(
            "forgetting guard: SRCC on D fell from {before:.4} to {:.4}",
            train.srcc
        ));
    }
    let rejected = reject_outliers(&records)
        .subjects
        .into_iter()
        .filter(|s| s.rejected)
        .map(|s| s.subject_id)
        .collect();
    let duplicates: Vec<serde_json::Value> =
        io::read_jsonl(&paths.round_file(t, "duplicates.jsonl")).unwrap_or_default();
    let metrics = RoundMetrics {
        round: t,
        probe: probe_correlation(&f, world)?,
        train,
        pool: member_metrics(&entries),
        pairs: pairs.len(),
        duplicates: duplicates.len(),
        images: StudyPlan::from_pairs(&pairs).samples.len(),
        labeled: new_labels.len(),
        ratings: records.len(),
        ratings_removed: screening_removed,
        rejected_subjects: rejected,
        excluded_samples: StudyPlan::from_pairs(&pairs).samples.len() - new_labels.len(),
        unlabeled_pairs: unlabeled.len(),
        ensemble_success_rate: summary.ensemble_success_rate(),
        target_success_rate: summary.target_success_rate(),
        cases: summary,
        new_labels_srcc_before: on_new(&f_prev),
        new_labels_srcc_after: on_new(&f),
        forgetting: Some(Forgetting {
            srcc_on_d_before: before,
            srcc_on_d_after: train.srcc,
            violated,
        }),
        warnings,
    };
    io::write_json(&paths.round_file(t, "metrics.json"), &metrics)?;
    Ok(metrics)
}

pub fn load_metrics(paths: &RunPaths, t: usize) -> Result<RoundMetrics> {
    io::read_json(&paths.round_file(t, "metrics.json"))
}

/// Rounds whose models are on disk.
pub fn completed_rounds(paths: &RunPaths) -> usize {
    (1..)
        .take_while(|t| paths.models(*t).join("f.json").exists() && paths.round_file(*t, "metrics.json").exists())
        .count()
}

/// Runs round `t` end to end: ensembles, scoring, selection, labeling,
/// rectification.
pub fn run_round(paths: &RunPaths, cfg: &RunConfig, world: &WorldData, t: usize) -> Result<RoundMetrics> {
    if t == 0 {
        return Err(Error::invalid("round 0 is the initial training"));
    }
    if paths.round_file(t, "metrics.json").exists() && paths.models(t).join("f.json").exists() {
        return load_metrics(paths, t);
    }
    if !paths.round_file(t, "pairs.jsonl").exists() {
        let scores = score_stage(paths, cfg, world, t)?;
        let specs = ensembles_stage(paths, cfg, t)?;
        gmad_stage(paths, cfg, world, t, &scores, &specs)?;
    }
    let labels_ready = paths.round_file(t, "labels.jsonl").exists() && paths.round_file(t, "cases.csv").exists();
    if !labels_ready {
        label_stage(paths, cfg, world, t)?;
    }
    rectify_stage(paths, cfg, world, t)
}

/// Initial training plus all configured rounds.
pub fn run_all(paths: &RunPaths, cfg: &RunConfig) -> Result<Vec<RoundMetrics>> {
    let world = synth(paths, cfg)?;
    let f = train_target(paths, cfg, &world)?;
    prune_stage(paths, cfg, &world, &f)?;
    let mut out = vec![load_metrics(paths, 0)?];
    for t in 1..=cfg.rounds {
        out.push(run_round(paths, cfg, &world, t)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TournamentOutcome {
    pub pairs: usize,
    pub ranking: RankingResult,
}

/// f⁽⁰⁾ … f⁽ʳ⁾ play each other on S \ L; the images are rated by a fresh
/// simulated study.
pub fn tournament_stage(paths: &RunPaths, cfg: &RunConfig, world: &WorldData) -> Result<TournamentOutcome> {
    let rounds = completed_rounds(paths);
    let mut models = Vec::with_capacity(rounds + 1);
    for t in 0..=rounds {
        let f = Model::load(&paths.models(t).join("f.json"))?;
        models.push((format!("f{t}"), f.predict_many(&world.pool)));
    }
    let eligible = eligibility(&world.pool, &labeled_ids(paths, rounds)?);
    let ids = world.pool_ids();
    let pairs = tournament(
        &models,
        &ids,
        Some(&eligible),
        &cfg.quality_levels(),
        cfg.tournament_pairs_per_level,
        rounds + 1,
    );
    let plan = StudyPlan::from_pairs(&pairs);
    let quality = world.pool_quality()?;
    let raw = run_oracle_study(&plan, &panel(cfg)?, rng::derive(cfg.seed, "study/tournament"), |id| {
        quality
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownSample(id.to_string()))
    })?;
    let screening = reject_outliers(&raw);
    let labels = compute_mos(&screening.records, &screening.excluded, LabelRole::Tournament)?;
    let names: Vec<String> = models.iter().map(|(n, _)| n.clone()).collect();
    let ranking = global_ranking(&pairs, &labels, &names)?;
    io::write_jsonl(&paths.tournament("pairs.jsonl"), &pairs)?;
    io::write_jsonl(&paths.tournament("ratings.jsonl"), &screening.records)?;
    io::write_labels(&paths.tournament("labels.jsonl"), &labels)?;
    let out = TournamentOutcome {
        pairs: pairs.len(),
        ranking,
    };
    io::write_json(&paths.tournament("ranking.json"), &out)?;
    write_rankings_csv(&paths.tournament("rankings.csv"), &out.ranking)?;
    Ok(out)
}

fn write_rankings_csv(path: &Path, r: &RankingResult) -> Result<()> {
    let mut s = String::from("model,aggressiveness,resistance\n");
    for (i, m) in r.models.iter().enumerate() {
        s.push_str(&format!("{m},{:.6},{:.6}\n", r.aggressiveness[i], r.resistance[i]));
    }
    io::write_atomic(path, s.as_bytes())
}

/// Failure-spotting comparison of the selectors on f⁽⁰⁾ with exact oracle
/// labels; the gMAD subset comes from round 1's pairs.
pub fn ablation_stage(paths: &RunPaths, cfg: &RunConfig, world: &WorldData) -> Result<Vec<baselines::AblationRow>> {
    let (f, pool) = load_models(paths, 0)?;
    let pairs = load_pairs(paths, 1)?;
    let samples = &world.pool;
    let ids = world.pool_ids();
    let candidates: Vec<usize> = (0..samples.len()).collect();
    let f_scores = f.predict_many(samples);
    let committee = score_pool(&pool, samples)?;
    let mos: Vec<f64> = samples.iter().map(Sample::true_quality).collect::<Result<_>>()?;
    let budget = cfg.ablation_budget;
    let seed = cfg.seed;
    let d = world.train_examples()?;
    let aux = baselines::train_residual_model(&f, &d, &cfg.train_config(rng::derive(seed, "ablation/rsal")))?;
    let position: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let gmad: Vec<usize> = baselines::select_gmad(&pairs, budget)
        .iter()
        .map(|id| {
            position
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::UnknownSample(id.clone()))
        })
        .collect::<Result<_>>()?;
    let selections: Vec<(&str, Vec<usize>)> = vec![
        (
            "random",
            baselines::select_random(&candidates, &ids, budget, rng::derive(seed, "ablation/random")),
        ),
        ("qbc", baselines::select_qbc(&committee, &candidates, budget)),
        (
            "emcm",
            baselines::select_emcm(&f, &f_scores, &committee, samples, &candidates, budget),
        ),
        ("rsal", baselines::select_rsal(&aux, samples, &candidates, budget)),
        (
            "gs",
            baselines::select_gs(
                &baselines::joint_space(samples, &f_scores, &candidates),
                &ids,
                &candidates,
                budget,
            ),
        ),
        ("gmad", gmad),
    ];
    let mut rows = Vec::with_capacity(selections.len());
    for (name, sel) in selections {
        let c = baselines::subset_correlation(&f_scores, &mos, &sel)?;
        rows.push(baselines::AblationRow {
            selector: name.to_string(),
            srcc: c.srcc,
            plcc: c.plcc,
            budget,
            selected: sel.len(),
            seed,
        });
    }
    write_ablation_csv(&paths.ablation(), &rows)?;
    Ok(rows)
}

fn write_ablation_csv(path: &Path, rows: &[baselines::AblationRow]) -> Result<()> {
    let mut s = String::from("selector,srcc,plcc,budget,selected,seed\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{},{},{}\n",
            r.selector, r.srcc, r.plcc, r.budget, r.selected, r.seed
        ));
    }
    io::write_atomic(path, s.as_bytes())
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<baselines::AblationRow>> {
    let text = io::read_text(path)?;
    let parse_err = |line: usize, m: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: m.to_string(),
    };
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(parse_err(i + 1, "expected 6 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(i + 1, &e.to_string()));
            let int = |s: &str| s.parse::<u64>().map_err(|e| parse_err(i + 1, &e.to_string()));
            Ok(baselines::AblationRow {
                selector: f[0].to_string(),
                srcc: num(f[1])?,
                plcc: num(f[2])?,
                budget: int(f[3])? as usize,
                selected: int(f[4])? as usize,
                seed: int(f[5])?,
            })
        })
        .collect()
}

/// Renders report.md from the files of a run directory.
pub fn render_report(paths: &RunPaths) -> Result<String> {
    let mut s = String::from("# Run report\n\n## Correlation with MOS\n\n");
    s.push_str("| round | probe SRCC | probe PLCC | D SRCC | D PLCC |\n|---|---|---|---|---|\n");
    let mut metrics = Vec::new();
    for t in 0.. {
        let p = paths.round_file(t, "metrics.json");
        if !p.exists() {
            break;
        }
        let m: RoundMetrics = io::read_json(&p)?;
        s.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            m.round, m.probe.srcc, m.probe.plcc, m.train.srcc, m.train.plcc
        ));
        metrics.push(m);
    }
    s.push_str("\n## gMAD case distribution\n\n");
    s.push_str("| round | attacker | pairs | I | II | III | IV | exposure rate |\n|---|---|---|---|---|---|---|---|\n");
    for m in metrics.iter().filter(|m| m.round > 0) {
        for (who, c, rate) in [
            ("ensembles", m.cases.ensemble_attacks, m.ensemble_success_rate),
            ("f", m.cases.target_attacks, m.target_success_rate),
        ] {
            s.push_str(&format!(
                "| {} | {who} | {} | {} | {} | {} | {} | {:.4} |\n",
                m.round,
                c.total(),
                c.i,
                c.ii,
                c.iii,
                c.iv,
                rate
            ));
        }
    }
    s.push_str("\n## Global ranking\n\n| model | aggressiveness | resistance |\n|---|---|---|\n");
    let rp = paths.tournament("ranking.json");
    if rp.exists() {
        let t: TournamentOutcome = io::read_json(&rp)?;
        for (i, m) in t.ranking.models.iter().enumerate() {
            s.push_str(&format!(
                "| {m} | {:.4} | {:.4} |\n",
                t.ranking.aggressiveness[i], t.ranking.resistance[i]
            ));
        }
    }
    s.push_str("\n## Failure-spotting efficiency (lower is better)\n\n| selector | SRCC | PLCC |\n|---|---|---|\n");
    if paths.ablation().exists() {
        for r in read_ablation_csv(&paths.ablation())? {
            s.push_str(&format!("| {} | {:.4} | {:.4} |\n", r.selector, r.srcc, r.plcc));
        }
    }
    Ok(s)
}

pub fn report_stage(paths: &RunPaths) -> Result<String> {
    let s = render_report(paths)?;
    io::write_atomic(&paths.report(), s.as_bytes())?;
    Ok(s)
}

/// Per-round summary of label counts, for reporting.
pub fn label_counts(paths: &RunPaths) -> Result<BTreeMap<usize, usize>> {
    let mut out = BTreeMap::new();
    for t in 1..=completed_rounds(paths) {
        out.insert(
            t,
            io::load_labels(&paths.round_file(t, "labels.jsonl"), LabelRole::Gmad(t))?.len(),
        );
    }
    Ok(out)
}
