//! Rating screening checks shared by the test targets.

use std::collections::BTreeMap;

use iqa_troubleshoot::subjective::{
    reject_outliers, run_oracle_study, simulated_panel, PanelConfig, RatingFlag, RatingRecord, StudyPlan,
    SubjectProfile,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn record(sample: &str, subject: &str, rating: f64) -> RatingRecord {
    RatingRecord {
        pair_id: String::new(),
        sample_id: sample.into(),
        subject_id: subject.into(),
        rating,
        flag: RatingFlag::Kept,
    }
}

/// The screening rule written out directly: each rating against the
/// statistics of the other ratings of its sample, then the subject rule.
pub fn reference_screen(records: &[RatingRecord]) -> (Vec<bool>, BTreeMap<String, bool>) {
    let mut by_sample: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_sample.entry(&r.sample_id).or_default().push(i);
    }
    let mut side = vec![0i32; records.len()];
    let mut counted = vec![false; records.len()];
    for idx in by_sample.values() {
        if idx.len() < 3 {
            continue;
        }
        for &i in idx {
            counted[i] = true;
            let o: Vec<f64> = idx.iter().filter(|&&j| j != i).map(|&j| records[j].rating).collect();
            let n = o.len() as f64;
            let mean = o.iter().sum::<f64>() / n;
            let var_pop = o.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let sd = (o.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let kurt = if var_pop > 0.0 {
                o.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n / (var_pop * var_pop)
            } else {
                0.0
            };
            let k = if (2.0..=4.0).contains(&kurt) { 2.0 } else { 20f64.sqrt() };
            let r = records[i].rating;
            side[i] = if r > mean + k * sd {
                1
            } else if r < mean - k * sd {
                -1
            } else {
                0
            };
        }
    }
    let mut per_subject: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if !counted[i] {
            continue;
        }
        let e = per_subject.entry(r.subject_id.clone()).or_default();
        e.0 += 1;
        match side[i] {
            1 => e.1 += 1,
            -1 => e.2 += 1,
            _ => {}
        }
    }
    let rejected: BTreeMap<String, bool> = per_subject
        .into_iter()
        .map(|(s, (n, p, q))| {
            let t = (p + q) as f64;
            let rej = t > 0.0 && t / n as f64 > 0.05 && (p as f64 - q as f64).abs() / t < 0.3;
            (s, rej)
        })
        .collect();
    let removed = records
        .iter()
        .enumerate()
        .map(|(i, r)| side[i] != 0 || rejected.get(&r.subject_id).copied().unwrap_or(false))
        .collect();
    (removed, rejected)
}

pub fn a_single_far_rating_is_flagged() {
    let mut recs: Vec<RatingRecord> = (0..19)
        .map(|i| record("a", &format!("s{i:02}"), 50.0 + ((i * 7) % 5) as f64 * 0.3 - 0.6))
        .collect();
    recs.push(record("a", "s19", 99.0));
    let out = reject_outliers(&recs);
    let flagged: Vec<&str> = out
        .records
        .iter()
        .filter(|r| r.flag == RatingFlag::OutlierRemoved)
        .map(|r| r.subject_id.as_str())
        .collect();
    assert_eq!(flagged, vec!["s19"]);
    assert_eq!(reference_screen(&recs).0.iter().filter(|f| **f).count(), 1);
}

pub fn clean_panel(n: usize) -> Vec<SubjectProfile> {
    let cfg = PanelConfig {
        subjects: n,
        outlier_prob: 0.0,
        ..PanelConfig::default()
    };
    simulated_panel(&cfg, 11).unwrap()
}

pub fn study(samples: usize, seed: u64) -> (StudyPlan, Vec<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<String> = (0..samples).map(|i| format!("img{i:03}")).collect();
    let q = (0..samples).map(|_| r.random_range(5.0..95.0)).collect();
    (StudyPlan::from_samples(&ids), q)
}

pub fn rate(plan: &StudyPlan, quality: &[f64], panel: &[SubjectProfile]) -> Vec<RatingRecord> {
    let pos: BTreeMap<&str, usize> = plan.samples.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    run_oracle_study(plan, panel, 5, |id| Ok(quality[pos[id]])).unwrap()
}

pub fn adversarial_uniform_subject_is_rejected() {
    let (plan, q) = study(100, 1);
    let mut recs = rate(&plan, &q, &clean_panel(20));
    let mut r = ChaCha8Rng::seed_from_u64(99);
    for id in &plan.samples {
        recs.push(record(id, "adversary", r.random_range(0.0..=100.0)));
    }
    let out = reject_outliers(&recs);
    let rejected: Vec<&str> = out
        .subjects
        .iter()
        .filter(|s| s.rejected)
        .map(|s| s.subject_id.as_str())
        .collect();
    assert_eq!(rejected, vec!["adversary"]);
    let adv = out.subjects.iter().find(|s| s.subject_id == "adversary").unwrap();
    assert!((adv.high + adv.low) as f64 / adv.ratings as f64 > 0.05);
    let (_, reference) = reference_screen(&recs);
    assert!(reference["adversary"]);
    assert_eq!(reference.values().filter(|r| **r).count(), 1);
}

pub fn clean_study_keeps_every_subject() {
    let (plan, q) = study(100, 2);
    let out = reject_outliers(&rate(&plan, &q, &clean_panel(20)));
    assert!(out.subjects.iter().all(|s| !s.rejected));
    let frac = out.removed() as f64 / out.records.len() as f64;
    assert!(frac < 0.1);
}

pub fn noisy_study() -> impl Strategy<Value = Vec<RatingRecord>> {
    (3usize..12, 1usize..8, any::<u64>()).prop_map(|(subjects, samples, seed)| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for s in 0..samples {
            let q: f64 = r.random_range(0.0..100.0);
            for j in 0..subjects {
                let rating = if r.random_bool(0.1) {
                    r.random_range(0.0..=100.0)
                } else {
                    (q + r.random_range(-5.0..5.0)).clamp(0.0, 100.0)
                };
                if r.random_bool(0.95) {
                    out.push(record(&format!("x{s}"), &format!("s{j}"), rating));
                }
            }
        }
        out
    })
}

pub fn screening_follows_the_written_rule(cases: u32) {
    super::runner(cases)
        .run(&noisy_study(), |recs| {
            let out = reject_outliers(&recs);
            let (removed, rejected) = reference_screen(&recs);
            for (r, want) in out.records.iter().zip(&removed) {
                prop_assert_eq!(r.flag == RatingFlag::OutlierRemoved, *want);
            }
            for s in &out.subjects {
                prop_assert_eq!(s.rejected, rejected[&s.subject_id]);
            }
            Ok(())
        })
        .unwrap();
}

pub fn screening_is_idempotent(cases: u32) {
    super::runner(cases)
        .run(&noisy_study(), |recs| {
            let once = reject_outliers(&recs);
            let twice = reject_outliers(&once.records);
            prop_assert_eq!(&once.records, &twice.records);
            prop_assert_eq!(once.subjects, twice.subjects);
            Ok(())
        })
        .unwrap();
}
