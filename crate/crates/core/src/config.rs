//! Flat key = value run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datapool::{Attribute, BiasSpec};
use crate::error::{Error, Result};
use crate::gmad::{uniform_levels, QualityLevel};
use crate::model::TrainConfig;
use crate::pruning::{Criterion, PoolConfig};
use crate::subjective::PanelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Oracle,
    Live,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Freezes the latent-to-feature embedding shared by every pool.
    pub world_seed: u64,
    pub dim: usize,
    pub pool_size: usize,
    pub train_size: usize,
    pub probe_size: usize,
    /// D under-samples the region `noise > bias_noise_above` and
    /// `blur > bias_blur_above` by `bias_factor`; a factor of 1 is uniform.
    pub bias_noise_above: f64,
    pub bias_blur_above: f64,
    pub bias_factor: f64,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub train_lr: f64,
    pub train_epochs: usize,
    pub pool_lr: f64,
    pub pool_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_epochs: usize,
    pub criteria: Vec<String>,
    pub ratios: Vec<f64>,
    pub slimming_warmup_epochs: usize,
    pub slimming_l1: f64,
    pub taylor_batch: usize,
    pub srcc_floor: f64,
    pub ensemble_size: usize,
    pub ensembles: usize,
    pub levels: usize,
    pub k: usize,
    /// Cap on |M| per round; absent means no cap.
    pub budget: Option<usize>,
    pub threshold: f64,
    pub rounds: usize,
    pub backend: Backend,
    pub subjects: usize,
    pub rater_bias_sd: f64,
    pub rater_noise_min: f64,
    pub rater_noise_max: f64,
    pub rater_outlier_prob: f64,
    pub forget_epsilon: f64,
    pub tournament_pairs_per_level: usize,
    pub ablation_budget: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            world_seed: 2024,
            dim: 8,
            pool_size: 100_000,
            train_size: 4_000,
            probe_size: 1_000,
            bias_noise_above: 0.6,
            bias_blur_above: 0.6,
            bias_factor: 0.05,
            hidden: vec![64, 32],
            batch_size: 32,
            train_lr: 1e-3,
            train_epochs: 60,
            pool_lr: 1e-3,
            pool_epochs: 10,
            finetune_lr: 1e-4,
            finetune_epochs: 10,
            criteria: Criterion::ALL.iter().map(|c| c.name().to_string()).collect(),
            ratios: vec![0.3, 0.5, 0.7],
            slimming_warmup_epochs: 3,
            slimming_l1: 1e-3,
            taylor_batch: 256,
            srcc_floor: 0.5,
            ensemble_size: 8,
            ensembles: 120,
            levels: 5,
            k: 1,
            budget: None,
            threshold: 10.0,
            rounds: 2,
            backend: Backend::Oracle,
            subjects: 20,
            rater_bias_sd: 3.0,
            rater_noise_min: 2.0,
            rater_noise_max: 6.0,
            rater_outlier_prob: 0.03,
            forget_epsilon: 0.05,
            tournament_pairs_per_level: 20,
            ablation_budget: 200,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON form, so formatting and comments in
    /// the source file do not matter.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim < crate::datapool::N_ATTRIBUTES {
            return bad(format!("dim {} below the attribute count", self.dim));
        }
        if self.pool_size == 0 || self.train_size == 0 || self.probe_size == 0 {
            return bad("pool, train and probe sizes must be positive".into());
        }
        if !(self.bias_factor > 0.0 && self.bias_factor <= 1.0) {
            return bad("bias_factor must lie in (0, 1]".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be non-empty and positive".into());
        }
        self.criteria()?;
        if self.ratios.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return bad("ratios must lie in (0, 1)".into());
        }
        let m = self.pool_members();
        if self.ensemble_size == 0 || self.ensemble_size > m {
            return bad(format!("ensemble_size must lie in 1..={m}"));
        }
        if self.ensembles as u128 > crate::ensemble::binomial(m, self.ensemble_size) {
            return bad("more ensembles requested than distinct subsets".into());
        }
        if self.levels == 0 || self.k == 0 {
            return bad("levels and k must be positive".into());
        }
        if !(self.threshold >= 0.0) || self.subjects == 0 {
            return bad("threshold must be non-negative and subjects positive".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        Ok(())
    }

    pub fn criteria(&self) -> Result<Vec<Criterion>> {
        self.criteria
            .iter()
            .map(|c| Criterion::parse(c).map_err(|e| Error::Config(e.to_string())))
            .collect()
    }

    pub fn pool_members(&self) -> usize {
        self.criteria.len() * self.ratios.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.dim];
        w.extend(&self.hidden);
        w.push(1);
        w
    }

    pub fn train_bias(&self) -> BiasSpec {
        if self.bias_factor >= 1.0 {
            BiasSpec::Uniform
        } else {
            BiasSpec::region(
                &[
                    (Attribute::Noise, self.bias_noise_above, 1.0),
                    (Attribute::Blur, self.bias_blur_above, 1.0),
                ],
                self.bias_factor,
            )
        }
    }

    pub fn quality_levels(&self) -> Vec<QualityLevel> {
        uniform_levels(self.levels).expect("validated")
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train_lr,
            batch_size: self.batch_size,
            max_epochs: self.train_epochs,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn finetune_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.finetune_lr,
            batch_size: self.batch_size,
            max_epochs: self.finetune_epochs,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn pool_config(&self, seed: u64) -> PoolConfig {
        PoolConfig {
            finetune: TrainConfig {
                learning_rate: self.pool_lr,
                batch_size: self.batch_size,
                max_epochs: self.pool_epochs,
                seed,
                ..TrainConfig::default()
            },
            slimming_warmup_epochs: self.slimming_warmup_epochs,
            slimming_l1: self.slimming_l1,
            taylor_batch: self.taylor_batch,
            srcc_floor: self.srcc_floor,
        }
    }

    pub fn panel_config(&self) -> PanelConfig {
        PanelConfig {
            subjects: self.subjects,
            bias_sd: self.rater_bias_sd,
            noise_sd_range: (self.rater_noise_min, self.rater_noise_max),
            outlier_prob: self.rater_outlier_prob,
        }
    }
}
