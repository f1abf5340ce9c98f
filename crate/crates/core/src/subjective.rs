//! Rating collection and cleaning: simulated subjects, BT.500-style
//! outlier screening, MOS computation, and case classification of rated
//! gMAD pairs.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datapool::{LabelEntry, LabelRole, LabeledSet};
use crate::error::{Error, Result};
use crate::gmad::GmadPair;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub subject_id: String,
    pub bias: f64,
    pub noise_sd: f64,
    pub outlier_prob: f64,
    pub seed: u64,
}

/// Panel statistics for simulated studies.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelConfig {
    pub subjects: usize,
    pub bias_sd: f64,
    pub noise_sd_range: (f64, f64),
    pub outlier_prob: f64,
}

impl Default for PanelConfig {
    fn default() -> Self {
        PanelConfig {
            subjects: 20,
            bias_sd: 3.0,
            noise_sd_range: (2.0, 6.0),
            outlier_prob: 0.03,
        }
    }
}

/// Subjects `subj00`, `subj01`, ... drawn from `cfg`.
pub fn simulated_panel(cfg: &PanelConfig, seed: u64) -> Result<Vec<SubjectProfile>> {
    let (lo, hi) = cfg.noise_sd_range;
    if !(lo >= 0.0 && hi >= lo) || !(0.0..1.0).contains(&cfg.outlier_prob) || !(cfg.bias_sd >= 0.0) {
        return Err(Error::invalid("invalid panel configuration"));
    }
    let mut r = rng::stream(seed, "panel");
    let bias = Normal::new(0.0, cfg.bias_sd).expect("finite sd");
    Ok((0..cfg.subjects)
        .map(|i| SubjectProfile {
            subject_id: format!("subj{i:02}"),
            bias: bias.sample(&mut r),
            noise_sd: if hi > lo { r.random_range(lo..hi) } else { lo },
            outlier_prob: cfg.outlier_prob,
            seed: r.random(),
        })
        .collect())
}

/// One simulated rating. Deterministic in `(profile, sample_id, draw)`,
/// so replaying a study in any order reproduces it.
pub fn oracle_rate(quality: f64, profile: &SubjectProfile, sample_id: &str, draw: u64) -> f64 {
    let mut r = rng::stream(profile.seed, &format!("rate/{sample_id}/{draw}"));
    let u: f64 = r.random();
    if u < profile.outlier_prob {
        return r.random_range(0.0..=100.0);
    }
    let noise = if profile.noise_sd > 0.0 {
        Normal::new(0.0, profile.noise_sd).expect("finite sd").sample(&mut r)
    } else {
        0.0
    };
    (quality + profile.bias + noise).clamp(0.0, 100.0)
}

/// A subject's presentation order over the study samples.
pub fn presentation_order(samples: &[String], subject_id: &str, study_seed: u64) -> Vec<String> {
    let mut order = samples.to_vec();
    order.shuffle(&mut rng::stream(study_seed, &format!("order/{subject_id}")));
    order
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatingFlag {
    Kept,
    OutlierRemoved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub pair_id: String,
    pub sample_id: String,
    pub subject_id: String,
    pub rating: f64,
    pub flag: RatingFlag,
}

/// Canonical record order: sample id, then subject id.
pub fn sort_records(records: &mut [RatingRecord]) {
    records.sort_by(|a, b| {
        a.sample_id
            .cmp(&b.sample_id)
            .then_with(|| a.subject_id.cmp(&b.subject_id))
    });
}

/// The samples of a study, each tagged with the first pair it came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StudyPlan {
    pub samples: Vec<String>,
    pub pair_of: BTreeMap<String, String>,
}

impl StudyPlan {
    pub fn from_pairs(pairs: &[GmadPair]) -> Self {
        let mut plan = StudyPlan::default();
        for p in pairs {
            for id in [&p.x_id, &p.y_id] {
                if !plan.pair_of.contains_key(id) {
                    plan.pair_of.insert(id.clone(), p.pair_id.clone());
                    plan.samples.push(id.clone());
                }
            }
        }
        plan
    }

    pub fn from_samples(samples: &[String]) -> Self {
        StudyPlan {
            samples: samples.to_vec(),
            pair_of: samples.iter().map(|s| (s.clone(), String::new())).collect(),
        }
    }

    pub fn pair_of(&self, sample: &str) -> String {
        self.pair_of.get(sample).cloned().unwrap_or_default()
    }
}

/// Every subject rates every plan sample once (draw 0), presented in the
/// subject's seeded order. Records are returned in canonical order.
pub fn run_oracle_study<F>(
    plan: &StudyPlan,
    panel: &[SubjectProfile],
    study_seed: u64,
    quality: F,
) -> Result<Vec<RatingRecord>>
where
    F: Fn(&str) -> Result<f64>,
{
    let mut out = Vec::with_capacity(plan.samples.len() * panel.len());
    for subject in panel {
        for id in presentation_order(&plan.samples, &subject.subject_id, study_seed) {
            let q = quality(&id)?;
            out.push(RatingRecord {
                pair_id: plan.pair_of(&id),
                rating: oracle_rate(q, subject, &id, 0),
                sample_id: id,
                subject_id: subject.subject_id.clone(),
                flag: RatingFlag::Kept,
            });
        }
    }
    sort_records(&mut out);
    Ok(out)
}

/// Rating counts per subject, against the number needed for completion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyProgress {
    pub per_subject: BTreeMap<String, usize>,
    pub rated_samples: usize,
    pub total_samples: usize,
    pub ratings: usize,
    pub required: usize,
    pub complete: bool,
}

/// A study is complete once every plan sample holds at least
/// `min_subjects` ratings.
pub fn study_progress(plan: &StudyPlan, records: &[RatingRecord], min_subjects: usize) -> StudyProgress {
    let mut per_subject = BTreeMap::new();
    let mut per_sample: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        *per_subject.entry(r.subject_id.clone()).or_insert(0) += 1;
        *per_sample.entry(r.sample_id.as_str()).or_insert(0) += 1;
    }
    let covered = plan
        .samples
        .iter()
        .filter(|s| per_sample.get(s.as_str()).copied().unwrap_or(0) >= min_subjects)
        .count();
    let rated = plan
        .samples
        .iter()
        .map(|s| per_sample.get(s.as_str()).copied().unwrap_or(0).min(min_subjects))
        .sum();
    StudyProgress {
        per_subject,
        rated_samples: covered,
        total_samples: plan.samples.len(),
        ratings: rated,
        required: plan.samples.len() * min_subjects,
        complete: covered == plan.samples.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectStats {
    pub subject_id: String,
    pub ratings: usize,
    /// Ratings above the per-sample band.
    pub high: usize,
    /// Ratings below the per-sample band.
    pub low: usize,
    pub rejected: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Screening {
    pub records: Vec<RatingRecord>,
    pub subjects: Vec<SubjectStats>,
    /// Samples with fewer than three ratings; left out of the MOS.
    pub excluded: Vec<String>,
    pub warnings: Vec<String>,
}

impl Screening {
    pub fn removed(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.flag == RatingFlag::OutlierRemoved)
            .count()
    }
}

/// Outlier-band thresholds for the screening.
pub const SUBJECT_OUTLIER_FRACTION: f64 = 0.05;
pub const SUBJECT_SYMMETRY: f64 = 0.3;

/// BT.500-style screening.
///
/// Each rating is tested against the mean, sample standard deviation and
/// population kurtosis of the *other* ratings of the same sample: it is an
/// outlier outside `mean ± 2 sd` when `2 <= kurtosis <= 4`, otherwise
/// outside `mean ± sqrt(20) sd`. A subject whose outlier fraction exceeds
/// 5% while `|high - low| / (high + low) < 0.3` is rejected wholesale.
///
/// Flags are recomputed from the ratings alone, ignoring incoming flags,
/// so screening an already screened set changes nothing.
pub fn reject_outliers(records: &[RatingRecord]) -> Screening {
    let mut by_sample: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_sample.entry(r.sample_id.as_str()).or_default().push(i);
    }
    let mut outlier = vec![None::<bool>; records.len()];
    let mut excluded = Vec::new();
    let mut warnings = Vec::new();
    for (sample, idx) in &by_sample {
        if idx.len() < 3 {
            excluded.push(sample.to_string());
            warnings.push(format!(
                "sample `{sample}` has {} rating(s); excluded from screening and MOS",
                idx.len()
            ));
            continue;
        }
        let values: Vec<f64> = idx.iter().map(|&i| records[i].rating).collect();
        for (pos, &i) in idx.iter().enumerate() {
            let others: Vec<f64> = values
                .iter()
                .enumerate()
                .filter(|(p, _)| *p != pos)
                .map(|(_, v)| *v)
                .collect();
            let (mean, sd, kurt) = moments(&others);
            let band = if (2.0..=4.0).contains(&kurt) {
                2.0 * sd
            } else {
                20f64.sqrt() * sd
            };
            let r = records[i].rating;
            outlier[i] = if r > mean + band {
                Some(true)
            } else if r < mean - band {
                Some(false)
            } else {
                None
            };
        }
    }
    let excluded_set: BTreeSet<&str> = excluded.iter().map(String::as_str).collect();
    let mut stats: BTreeMap<&str, SubjectStats> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if excluded_set.contains(r.sample_id.as_str()) {
            continue;
        }
        let s = stats.entry(r.subject_id.as_str()).or_insert_with(|| SubjectStats {
            subject_id: r.subject_id.clone(),
            ratings: 0,
            high: 0,
            low: 0,
            rejected: false,
        });
        s.ratings += 1;
        match outlier[i] {
            Some(true) => s.high += 1,
            Some(false) => s.low += 1,
            None => {}
        }
    }
    for s in stats.values_mut() {
        let total = s.high + s.low;
        if total > 0 {
            let frac = total as f64 / s.ratings as f64;
            let asym = (s.high as f64 - s.low as f64).abs() / total as f64;
            s.rejected = frac > SUBJECT_OUTLIER_FRACTION && asym < SUBJECT_SYMMETRY;
        }
    }
    let out = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let rejected = stats.get(r.subject_id.as_str()).is_some_and(|s| s.rejected);
            let mut r = r.clone();
            r.flag = if rejected || outlier[i].is_some() {
                RatingFlag::OutlierRemoved
            } else {
                RatingFlag::Kept
            };
            r
        })
        .collect();
    Screening {
        records: out,
        subjects: stats.into_values().collect(),
        excluded,
        warnings,
    }
}

/// Mean, sample standard deviation and population kurtosis.
fn moments(v: &[f64]) -> (f64, f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let m2 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m4 = v.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    let sd = if v.len() > 1 { (m2 * n / (n - 1.0)).sqrt() } else { 0.0 };
    let kurt = if m2 > 0.0 { m4 / (m2 * m2) } else { 0.0 };
    (mean, sd, kurt)
}

/// MOS over kept ratings of samples not in `excluded`.
pub fn compute_mos(records: &[RatingRecord], excluded: &[String], role: LabelRole) -> Result<LabeledSet> {
    let skip: BTreeSet<&str> = excluded.iter().map(String::as_str).collect();
    let mut by_sample: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records {
        if r.flag == RatingFlag::Kept && !skip.contains(r.sample_id.as_str()) {
            by_sample.entry(r.sample_id.as_str()).or_default().push(r.rating);
        }
    }
    let mut set = LabeledSet::new(role);
    for (id, mut v) in by_sample {
        // summation order must not depend on record order
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        // shifted by the first rating so identical ratings average exactly
        let mos = v[0] + v.iter().map(|x| x - v[0]).sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mos).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        set.insert(
            id,
            LabelEntry {
                mos: mos.clamp(0.0, 100.0),
                std,
                n_ratings: v.len(),
            },
        )?;
    }
    Ok(set)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CaseLabel {
    /// Both models consistent with the raters.
    I,
    /// Only the competitor `g` consistent.
    II,
    /// Only the target `f` consistent.
    III,
    /// Neither consistent.
    IV,
}

impl CaseLabel {
    pub const ALL: [CaseLabel; 4] = [CaseLabel::I, CaseLabel::II, CaseLabel::III, CaseLabel::IV];

    pub fn name(self) -> &'static str {
        match self {
            CaseLabel::I => "I",
            CaseLabel::II => "II",
            CaseLabel::III => "III",
            CaseLabel::IV => "IV",
        }
    }

    pub fn from_consistency(f_ok: bool, g_ok: bool) -> CaseLabel {
        match (f_ok, g_ok) {
            (true, true) => CaseLabel::I,
            (false, true) => CaseLabel::II,
            (true, false) => CaseLabel::III,
            (false, false) => CaseLabel::IV,
        }
    }
}

/// Attacker consistent iff raters see `x` better than `y` by more than
/// `threshold`; defender consistent iff they see the two within
/// `threshold`.
pub fn role_consistency(mos_x: f64, mos_y: f64, threshold: f64) -> (bool, bool) {
    let gap = mos_x - mos_y;
    (gap > threshold, gap.abs() <= threshold)
}

/// Case of a rated pair from the point of view of target `f`.
pub fn classify_case(pair: &GmadPair, target: &str, mos_x: f64, mos_y: f64, threshold: f64) -> CaseLabel {
    let (attacker_ok, defender_ok) = role_consistency(mos_x, mos_y, threshold);
    let (f_ok, g_ok) = if pair.attacker == target {
        (attacker_ok, defender_ok)
    } else {
        (defender_ok, attacker_ok)
    };
    CaseLabel::from_consistency(f_ok, g_ok)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub pair_id: String,
    pub case: CaseLabel,
}

/// Classifies every pair whose two images carry labels; unlabeled pairs
/// are returned separately.
pub fn classify_pairs(
    pairs: &[GmadPair],
    target: &str,
    labels: &LabeledSet,
    threshold: f64,
) -> (Vec<CaseRecord>, Vec<String>) {
    let mut cases = Vec::new();
    let mut missing = Vec::new();
    for p in pairs {
        match (labels.mos(&p.x_id), labels.mos(&p.y_id)) {
            (Some(x), Some(y)) => cases.push(CaseRecord {
                pair_id: p.pair_id.clone(),
                case: classify_case(p, target, x, y, threshold),
            }),
            _ => missing.push(p.pair_id.clone()),
        }
    }
    (cases, missing)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(bias: f64, sd: f64, outlier: f64) -> SubjectProfile {
        SubjectProfile {
            subject_id: "s".into(),
            bias,
            noise_sd: sd,
            outlier_prob: outlier,
            seed: 1,
        }
    }

    #[test]
    fn noiseless_rater_reproduces_quality() {
        assert_eq!(oracle_rate(63.25, &profile(0.0, 0.0, 0.0), "a", 0), 63.25);
        assert_eq!(oracle_rate(50.0, &profile(5.0, 0.0, 0.0), "a", 0), 55.0);
        assert_eq!(oracle_rate(98.0, &profile(5.0, 0.0, 0.0), "a", 0), 100.0);
    }

    #[test]
    fn rating_is_a_function_of_sample_and_draw() {
        let p = profile(1.0, 4.0, 0.1);
        assert_eq!(oracle_rate(40.0, &p, "x", 3), oracle_rate(40.0, &p, "x", 3));
        assert_ne!(oracle_rate(40.0, &p, "x", 3), oracle_rate(40.0, &p, "x", 4));
    }

    #[test]
    fn moments_of_a_known_set() {
        let (m, sd, k) = moments(&[40.0, 50.0, 60.0]);
        assert_eq!(m, 50.0);
        assert!((sd - 10.0).abs() < 1e-12);
        assert!((k - 1.5).abs() < 1e-12);
    }

    #[test]
    fn mos_of_three_and_of_one() {
        let rec = |s: &str, subj: &str, r: f64| RatingRecord {
            pair_id: String::new(),
            sample_id: s.into(),
            subject_id: subj.into(),
            rating: r,
            flag: RatingFlag::Kept,
        };
        let recs = vec![
            rec("a", "1", 40.0),
            rec("a", "2", 50.0),
            rec("a", "3", 60.0),
            rec("b", "1", 33.0),
        ];
        let set = compute_mos(&recs, &[], LabelRole::Probe).unwrap();
        let a = set.entries["a"];
        assert_eq!((a.mos, a.n_ratings), (50.0, 3));
        assert!((a.std - 10.0).abs() < 1e-12);
        let b = set.entries["b"];
        assert_eq!((b.mos, b.std, b.n_ratings), (33.0, 0.0, 1));
    }

    #[test]
    fn case_truth_table() {
        let pair = |att: &str, def: &str| GmadPair {
            pair_id: "p".into(),
            x_id: "x".into(),
            y_id: "y".into(),
            attacker: att.into(),
            defender: def.into(),
            level: 2,
            k_rank: 1,
            objective: 1.0,
            round: 1,
        };
        let f_defends = pair("g", "f");
        assert_eq!(classify_case(&f_defends, "f", 50.0, 50.0, 10.0), CaseLabel::III);
        assert_eq!(classify_case(&f_defends, "f", 80.0, 40.0, 10.0), CaseLabel::II);
        assert_eq!(classify_case(&f_defends, "f", 40.0, 80.0, 10.0), CaseLabel::IV);
        let f_attacks = pair("f", "g");
        assert_eq!(classify_case(&f_attacks, "f", 80.0, 40.0, 10.0), CaseLabel::III);
        assert_eq!(classify_case(&f_attacks, "f", 50.0, 55.0, 10.0), CaseLabel::II);
        assert_eq!(classify_case(&f_attacks, "f", 40.0, 80.0, 10.0), CaseLabel::IV);
        assert_eq!(CaseLabel::from_consistency(true, true), CaseLabel::I);
    }
}
