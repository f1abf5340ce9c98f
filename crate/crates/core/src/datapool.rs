//! Synthetic world: latent distortion attributes, the ground-truth quality
//! oracle, the fixed latent-to-feature embedding, and pool generation.
//!
//! Pools are drawn by Latin-hypercube sampling over the six latent attributes,
//! which gives exactly uniform per-attribute marginals. A [`BiasSpec`] carves
//! out an axis-aligned region and keeps only a fraction of the density there;
//! training sets drawn that way leave the target model blind to that corner.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const N_ATTRIBUTES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Noise,
    Blur,
    Exposure,
    Contrast,
    Colorfulness,
    Sharpness,
}

impl Attribute {
    pub const ALL: [Attribute; N_ATTRIBUTES] = [
        Attribute::Noise,
        Attribute::Blur,
        Attribute::Exposure,
        Attribute::Contrast,
        Attribute::Colorfulness,
        Attribute::Sharpness,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Noise => "noise",
            Attribute::Blur => "blur",
            Attribute::Exposure => "exposure",
            Attribute::Contrast => "contrast",
            Attribute::Colorfulness => "colorfulness",
            Attribute::Sharpness => "sharpness",
        }
    }
}

/// Degradation magnitudes in `[0, 1]`; 0 is pristine along every axis.
///
/// `exposure` is over-exposure (brightening), `contrast`, `colorfulness` and
/// `sharpness` are losses of the named property.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latents {
    pub noise: f64,
    pub blur: f64,
    pub exposure: f64,
    pub contrast: f64,
    pub colorfulness: f64,
    pub sharpness: f64,
}

impl Latents {
    pub fn from_array(a: [f64; N_ATTRIBUTES]) -> Self {
        Latents {
            noise: a[0],
            blur: a[1],
            exposure: a[2],
            contrast: a[3],
            colorfulness: a[4],
            sharpness: a[5],
        }
    }

    pub fn to_array(&self) -> [f64; N_ATTRIBUTES] {
        [
            self.noise,
            self.blur,
            self.exposure,
            self.contrast,
            self.colorfulness,
            self.sharpness,
        ]
    }

    pub fn get(&self, attr: Attribute) -> f64 {
        self.to_array()[attr.index()]
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }
}

/// One unit of a pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    #[serde(default, deserialize_with = "null_as_empty")]
    pub features: Vec<f64>,
    #[serde(default)]
    pub latents: Option<Latents>,
    #[serde(default)]
    pub image_ref: Option<String>,
}

fn null_as_empty<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    Ok(Option::<Vec<f64>>::deserialize(d)?.unwrap_or_default())
}

impl Sample {
    /// Ground-truth quality; only synthetic samples carry latents.
    pub fn true_quality(&self) -> Result<f64> {
        self.latents
            .as_ref()
            .map(oracle_quality)
            .ok_or_else(|| Error::MissingLatents(self.id.clone()))
    }
}

/// Parameters of the ground-truth quality function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleParams {
    /// Per-attribute maximal multiplicative loss.
    pub weights: [f64; N_ATTRIBUTES],
    /// Extra loss when noise and blur are both strong.
    pub interaction: f64,
    pub steepness: f64,
    pub interaction_steepness: f64,
    pub interaction_center: f64,
}

pub const ORACLE: OracleParams = OracleParams {
    weights: [0.35, 0.35, 0.25, 0.25, 0.15, 0.25],
    interaction: 0.7,
    steepness: 6.0,
    interaction_steepness: 12.0,
    interaction_center: 0.65,
};

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Logistic ramp rescaled so that 0 maps to 0 and 1 maps to 1.
fn unit_ramp(a: f64, steepness: f64, center: f64) -> f64 {
    let lo = logistic(-steepness * center);
    let hi = logistic(steepness * (1.0 - center));
    (logistic(steepness * (a - center)) - lo) / (hi - lo)
}

/// Ground-truth perceptual quality on `[0, 100]`.
pub fn oracle_quality(latents: &Latents) -> f64 {
    oracle_quality_with(latents, &ORACLE)
}

pub fn oracle_quality_with(latents: &Latents, p: &OracleParams) -> f64 {
    let a = latents.to_array();
    let mut q = 100.0;
    for (v, w) in a.iter().zip(p.weights.iter()) {
        q *= 1.0 - w * unit_ramp(v.clamp(0.0, 1.0), p.steepness, 0.5);
    }
    let gate = |v: f64| unit_ramp(v.clamp(0.0, 1.0), p.interaction_steepness, p.interaction_center);
    q *= 1.0 - p.interaction * gate(a[0]) * gate(a[1]);
    q.clamp(0.0, 100.0)
}

/// Closed interval bound on one attribute, `lo < v <= hi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeBound {
    pub attribute: Attribute,
    pub lo: f64,
    pub hi: f64,
}

/// Coverage of a generated pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BiasSpec {
    #[default]
    Uniform,
    /// The conjunction of `bounds` keeps only `factor` of its uniform density.
    Region { bounds: Vec<AttributeBound>, factor: f64 },
}

impl BiasSpec {
    pub fn region(bounds: &[(Attribute, f64, f64)], factor: f64) -> Self {
        BiasSpec::Region {
            bounds: bounds
                .iter()
                .map(|&(attribute, lo, hi)| AttributeBound { attribute, lo, hi })
                .collect(),
            factor,
        }
    }

    pub fn contains(&self, latents: &Latents) -> bool {
        match self {
            BiasSpec::Uniform => false,
            BiasSpec::Region { bounds, .. } => bounds.iter().all(|b| {
                let v = latents.get(b.attribute);
                v > b.lo && v <= b.hi
            }),
        }
    }

    /// Uniform-measure volume of the region inside the unit cube.
    pub fn region_volume(&self) -> f64 {
        match self {
            BiasSpec::Uniform => 0.0,
            BiasSpec::Region { bounds, .. } => bounds
                .iter()
                .map(|b| (b.hi.min(1.0) - b.lo.max(0.0)).max(0.0))
                .product(),
        }
    }

    /// Expected share of the region in a pool drawn under this bias.
    pub fn region_share(&self) -> f64 {
        match self {
            BiasSpec::Uniform => 0.0,
            BiasSpec::Region { factor, .. } => {
                let v = self.region_volume();
                factor * v / (factor * v + (1.0 - v))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let BiasSpec::Region { bounds, factor } = self {
            if bounds.is_empty() {
                return Err(Error::invalid("bias region has no bounds"));
            }
            if !(0.0..=1.0).contains(factor) {
                return Err(Error::invalid(format!("bias factor {factor} outside [0, 1]")));
            }
            let v = self.region_volume();
            if v <= 0.0 {
                return Err(Error::invalid("bias region has zero mass"));
            }
            if v >= 1.0 && *factor == 0.0 {
                return Err(Error::invalid("bias removes the whole cube; pool has zero mass"));
            }
        }
        Ok(())
    }
}

/// Frozen map from latents to observed features.
///
/// A random orthonormal frame spreads the six latents over the informative
/// coordinates, a monotone smooth nonlinearity bends each coordinate, and the
/// remaining quarter of the dimensions carry pure noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    dim: usize,
    informative: usize,
    /// `informative x N_ATTRIBUTES`, orthonormal columns.
    frame: Vec<f64>,
    nuisance_sd: f64,
}

impl Embedding {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < N_ATTRIBUTES {
            return Err(Error::invalid(format!(
                "feature dimension {dim} below the {N_ATTRIBUTES} latent attributes"
            )));
        }
        let nuisance = (dim / 4).min(dim - N_ATTRIBUTES);
        let informative = dim - nuisance;
        let mut rng = rng::stream(seed, "embedding");
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(N_ATTRIBUTES);
        while cols.len() < N_ATTRIBUTES {
            let mut v: Vec<f64> = (0..informative).map(|_| StandardNormal.sample(&mut rng)).collect();
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|a| *a /= norm);
                cols.push(v);
            }
        }
        let mut frame = vec![0.0; informative * N_ATTRIBUTES];
        for (j, c) in cols.iter().enumerate() {
            for (i, v) in c.iter().enumerate() {
                frame[i * N_ATTRIBUTES + j] = *v;
            }
        }
        Ok(Embedding {
            dim,
            informative,
            frame,
            nuisance_sd: 0.5,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed<R: Rng + ?Sized>(&self, latents: &Latents, rng: &mut R) -> Vec<f64> {
        let centered = latents.to_array().map(|v| 2.0 * (v - 0.5));
        let mut out = Vec::with_capacity(self.dim);
        for i in 0..self.informative {
            let row = &self.frame[i * N_ATTRIBUTES..(i + 1) * N_ATTRIBUTES];
            let z: f64 = row.iter().zip(&centered).map(|(a, b)| a * b).sum();
            out.push((1.2 * z).tanh() + 0.2 * z);
        }
        for _ in self.informative..self.dim {
            let n: f64 = StandardNormal.sample(rng);
            out.push(self.nuisance_sd * n);
        }
        out
    }
}

/// A generator for every pool of one synthetic world.
#[derive(Clone, Debug)]
pub struct World {
    pub embedding: Embedding,
}

impl World {
    pub fn new(dim: usize, world_seed: u64) -> Result<Self> {
        Ok(World {
            embedding: Embedding::new(dim, world_seed)?,
        })
    }

    /// Draws `count` samples with ids `{prefix}{index:06}`.
    ///
    /// Pure in its arguments. Under a region bias the number of in-region
    /// samples is fixed to `round(count * region_share)`.
    pub fn synth_pool(&self, prefix: &str, count: usize, seed: u64, bias: &BiasSpec) -> Result<Vec<Sample>> {
        if count == 0 {
            return Err(Error::invalid("pool count must be positive"));
        }
        bias.validate()?;
        let mut rng = rng::stream(seed, &format!("pool/{prefix}"));
        let latents = match bias {
            BiasSpec::Uniform => latin_hypercube(count, &mut rng),
            BiasSpec::Region { .. } => {
                let n_in = (count as f64 * bias.region_share()).round() as usize;
                let n_out = count - n_in;
                let mut inside = Vec::with_capacity(n_in);
                let mut outside = Vec::with_capacity(n_out);
                while inside.len() < n_in || outside.len() < n_out {
                    for l in latin_hypercube(count, &mut rng) {
                        if bias.contains(&l) {
                            if inside.len() < n_in {
                                inside.push(l);
                            }
                        } else if outside.len() < n_out {
                            outside.push(l);
                        }
                    }
                }
                let mut all = outside;
                all.extend(inside);
                all.shuffle(&mut rng);
                all
            }
        };
        let mut noise_rng = rng::stream(seed, &format!("pool/{prefix}/nuisance"));
        Ok(latents
            .into_iter()
            .enumerate()
            .map(|(i, l)| Sample {
                id: format!("{prefix}{i:06}"),
                features: self.embedding.embed(&l, &mut noise_rng),
                latents: Some(l),
                image_ref: None,
            })
            .collect())
    }
}

fn latin_hypercube<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<Latents> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(N_ATTRIBUTES);
    for _ in 0..N_ATTRIBUTES {
        let mut strata: Vec<usize> = (0..count).collect();
        strata.shuffle(rng);
        cols.push(
            strata
                .into_iter()
                .map(|s| (s as f64 + rng.random::<f64>()) / count as f64)
                .collect(),
        );
    }
    (0..count)
        .map(|i| Latents::from_array(std::array::from_fn(|a| cols[a][i])))
        .collect()
}

/// Max/min bin-count ratio of a `bins`-bin histogram over `[0, 1]`.
pub fn marginal_ratio(samples: &[Sample], attr: Attribute, bins: usize) -> f64 {
    let mut counts = vec![0usize; bins];
    for s in samples {
        if let Some(l) = &s.latents {
            let b = ((l.get(attr) * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
    }
    let max = *counts.iter().max().unwrap_or(&0) as f64;
    let min = *counts.iter().min().unwrap_or(&0) as f64;
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn check_unique_ids(samples: &[Sample]) -> Result<()> {
    let mut seen = HashSet::with_capacity(samples.len());
    for s in samples {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::DuplicateId(s.id.clone()));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub mos: f64,
    pub std: f64,
    #[serde(rename = "n")]
    pub n_ratings: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelRole {
    TrainD,
    Gmad(usize),
    Probe,
    Tournament,
}

/// Mean opinion scores keyed by sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub role: LabelRole,
    pub entries: BTreeMap<String, LabelEntry>,
}

impl LabeledSet {
    pub fn new(role: LabelRole) -> Self {
        LabeledSet {
            role,
            entries: BTreeMap::new(),
        }
    }

    /// Exact labels straight from the oracle (`n = 1`, `std = 0`).
    pub fn from_oracle(role: LabelRole, samples: &[Sample]) -> Result<Self> {
        let mut set = LabeledSet::new(role);
        for s in samples {
            set.insert(
                &s.id,
                LabelEntry {
                    mos: s.true_quality()?,
                    std: 0.0,
                    n_ratings: 1,
                },
            )?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, id: &str, entry: LabelEntry) -> Result<()> {
        if !(0.0..=100.0).contains(&entry.mos) {
            return Err(Error::invalid(format!("mos {} for `{id}` outside [0, 100]", entry.mos)));
        }
        if self.entries.insert(id.to_string(), entry).is_some() {
            return Err(Error::DuplicateId(id.to_string()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mos(&self, id: &str) -> Option<f64> {
        self.entries.get(id).map(|e| e.mos)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::new(8, 11).unwrap()
    }

    fn corner() -> BiasSpec {
        BiasSpec::region(&[(Attribute::Noise, 0.6, 1.0), (Attribute::Blur, 0.6, 1.0)], 0.05)
    }

    #[test]
    fn full_size_uniform_pool_has_flat_marginals() {
        let pool = world().synth_pool("s", 100_000, 7, &BiasSpec::Uniform).unwrap();
        assert_eq!(pool.len(), 100_000);
        for a in Attribute::ALL {
            assert!(marginal_ratio(&pool, a, 10) <= 1.5, "{a:?}");
        }
        check_unique_ids(&pool).unwrap();
    }

    #[test]
    fn uniform_marginals_hold_across_seeds() {
        for seed in 0..20 {
            let pool = world().synth_pool("s", 500, seed, &BiasSpec::Uniform).unwrap();
            for a in Attribute::ALL {
                assert!(marginal_ratio(&pool, a, 10) <= 1.5);
            }
        }
    }

    #[test]
    fn single_sample_pool() {
        let pool = world().synth_pool("x", 1, 0, &BiasSpec::Uniform).unwrap();
        assert_eq!(pool.len(), 1);
        assert!(pool[0].features.iter().all(|v| v.is_finite()));
        assert_eq!(pool[0].features.len(), 8);
    }

    #[test]
    fn biased_pool_starves_the_corner() {
        let w = world();
        let biased = w.synth_pool("d", 5000, 3, &corner()).unwrap();
        let unbiased = w.synth_pool("d", 5000, 3, &BiasSpec::Uniform).unwrap();
        let spec = corner();
        let share = |p: &[Sample]| {
            p.iter().filter(|s| spec.contains(s.latents.as_ref().unwrap())).count() as f64 / p.len() as f64
        };
        assert!(share(&biased) < 0.01, "{}", share(&biased));
        let u = share(&unbiased);
        assert!((u - 0.16).abs() < 0.02, "{u}");
    }

    #[test]
    fn generation_is_pure() {
        let a = world().synth_pool("s", 300, 5, &corner()).unwrap();
        let b = world().synth_pool("s", 300, 5, &corner()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn generation_errors() {
        let w = world();
        assert!(w.synth_pool("s", 0, 1, &BiasSpec::Uniform).is_err());
        assert!(World::new(5, 1).is_err());
        let empty = BiasSpec::region(&[(Attribute::Noise, 0.7, 0.7)], 0.1);
        assert!(w.synth_pool("s", 10, 1, &empty).is_err());
        let all = BiasSpec::region(&[(Attribute::Noise, 0.0, 1.0)], 0.0);
        assert!(w.synth_pool("s", 10, 1, &all).is_err());
    }

    #[test]
    fn oracle_endpoints() {
        let zero = Latents::from_array([0.0; 6]);
        let one = Latents::from_array([1.0; 6]);
        assert!((oracle_quality(&zero) - 100.0).abs() < 1e-9);
        assert!(oracle_quality(&one) <= 5.0);
    }

    #[test]
    fn oracle_strictly_decreasing_in_noise() {
        let mut r = rng::stream(1, "test");
        for _ in 0..1000 {
            let mut a: [f64; 6] = std::array::from_fn(|_| r.random());
            let (lo, hi) = {
                let x: f64 = r.random();
                let y: f64 = r.random();
                (x.min(y), x.max(y))
            };
            if hi - lo < 1e-9 {
                continue;
            }
            a[0] = lo;
            let q_lo = oracle_quality(&Latents::from_array(a));
            a[0] = hi;
            let q_hi = oracle_quality(&Latents::from_array(a));
            assert!(q_hi < q_lo);
        }
    }

    #[test]
    fn oracle_has_noise_blur_interaction() {
        let base = [0.0; 6];
        let q = |n: f64, b: f64| {
            let mut a = base;
            a[0] = n;
            a[1] = b;
            oracle_quality(&Latents::from_array(a))
        };
        // Non-separable: the drop from blur depends on noise.
        let r_clean = q(0.0, 0.9) / q(0.0, 0.0);
        let r_noisy = q(0.9, 0.9) / q(0.9, 0.0);
        assert!(r_noisy < r_clean - 0.2);
    }

    #[test]
    fn missing_latents_is_an_error() {
        let s = Sample {
            id: "r1".into(),
            features: vec![1.0],
            latents: None,
            image_ref: None,
        };
        assert!(matches!(s.true_quality(), Err(Error::MissingLatents(_))));
    }

    #[test]
    fn labeled_set_rejects_out_of_range_and_duplicates() {
        let mut set = LabeledSet::new(LabelRole::Probe);
        let e = LabelEntry {
            mos: 50.0,
            std: 1.0,
            n_ratings: 3,
        };
        set.insert("a", e).unwrap();
        assert!(set.insert("a", e).is_err());
        assert!(set.insert("b", LabelEntry { mos: 101.0, ..e }).is_err());
    }
}
