//! Random-subset ensembles over the pruned pool, evaluated lazily from the
//! pool's score matrix.

use std::collections::HashSet;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scores::ScoreMatrix;

/// An ensemble `g`: the mean of the listed pool members.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub id: String,
    /// Pool indices, ascending.
    pub members: Vec<usize>,
}

impl EnsembleSpec {
    pub fn new(id: impl Into<String>, mut members: Vec<usize>, m: usize) -> Result<Self> {
        members.sort_unstable();
        let spec = EnsembleSpec { id: id.into(), members };
        spec.validate(m)?;
        Ok(spec)
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// The 0/1 membership row over a pool of size `m`.
    pub fn alpha(&self, m: usize) -> Vec<u8> {
        let mut a = vec![0; m];
        for &j in &self.members {
            a[j] = 1;
        }
        a
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::invalid(format!("ensemble `{}` is empty", self.id)));
        }
        if self.members.iter().any(|&j| j >= m) {
            return Err(Error::invalid(format!(
                "ensemble `{}` references a member outside a pool of {m}",
                self.id
            )));
        }
        if self.members.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("ensemble `{}` repeats a member", self.id)));
        }
        Ok(())
    }
}

/// `C(m, s)`, saturating at `u128::MAX`.
pub fn binomial(m: usize, s: usize) -> u128 {
    if s > m {
        return 0;
    }
    let s = s.min(m - s);
    let mut c: u128 = 1;
    for i in 0..s {
        c = match c.checked_mul((m - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    c
}

/// Draws `n` distinct `s`-subsets of `0..m`.
///
/// When the subsets can be listed cheaply they are enumerated and sampled
/// without replacement; otherwise subsets are drawn and duplicates redrawn.
pub fn sample_ensembles(m: usize, s: usize, n: usize, seed: u64) -> Result<Vec<EnsembleSpec>> {
    if s == 0 || s > m {
        return Err(Error::invalid(format!("ensemble size {s} not in 1..={m}")));
    }
    let total = binomial(m, s);
    if n as u128 > total {
        return Err(Error::invalid(format!(
            "{n} ensembles requested but only C({m},{s}) = {total} subsets exist"
        )));
    }
    let mut rng = rng::stream(seed, "ensembles");
    let subsets: Vec<Vec<usize>> = if total <= (4 * n as u128).max(64) {
        let all = combinations(m, s);
        sample_indices(&mut rng, all.len(), n)
            .into_iter()
            .map(|i| all[i].clone())
            .collect()
    } else {
        let mut seen = HashSet::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let mut c = sample_indices(&mut rng, m, s).into_vec();
            c.sort_unstable();
            if seen.insert(c.clone()) {
                out.push(c);
            }
        }
        out
    };
    subsets
        .into_iter()
        .enumerate()
        .map(|(i, c)| EnsembleSpec::new(format!("g{i:03}"), c, m))
        .collect()
}

/// All `s`-subsets of `0..m` in lexicographic order.
fn combinations(m: usize, s: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut c: Vec<usize> = (0..s).collect();
    loop {
        out.push(c.clone());
        let Some(i) = (0..s).rev().find(|&i| c[i] != i + m - s) else {
            return out;
        };
        c[i] += 1;
        for j in i + 1..s {
            c[j] = c[j - 1] + 1;
        }
    }
}

/// Mean of the member scores for the sample at column `sample`.
pub fn ensemble_predict(spec: &EnsembleSpec, pool: &ScoreMatrix, sample: usize) -> f64 {
    spec.members.iter().map(|&j| pool.get(j, sample)).sum::<f64>() / spec.size() as f64
}

/// One row per ensemble over the pool's samples.
pub fn ensemble_scores(specs: &[EnsembleSpec], pool: &ScoreMatrix) -> Result<ScoreMatrix> {
    for s in specs {
        s.validate(pool.n_models())?;
    }
    let n = pool.n_samples();
    let rows = specs
        .iter()
        .map(|spec| {
            let mut row = vec![0.0; n];
            for &j in &spec.members {
                for (r, v) in row.iter_mut().zip(pool.row(j)) {
                    *r += v;
                }
            }
            let k = spec.size() as f64;
            row.iter_mut().for_each(|r| *r /= k);
            row
        })
        .collect();
    ScoreMatrix::from_rows(
        specs.iter().map(|s| s.id.clone()).collect(),
        pool.sample_ids().to_vec(),
        rows,
    )
}
