use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use iqa_troubleshoot::config::RunConfig;
use iqa_troubleshoot::model::Model;
use iqa_troubleshoot::rng;
use iqa_troubleshoot::rounds::{self, RunPaths};
use iqa_troubleshoot::Error;
use serde_json::{json, Value};

use crate::server::{self, Study, StudySetup};

#[derive(Debug, Parser)]
#[command(
    name = "iqa-troubleshoot",
    version,
    about = "Troubleshoot a blind quality model with pruned self-competitors"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Run directory.
    #[arg(long, default_value = "run")]
    pub run: PathBuf,
    /// Configuration file; defaults to the one recorded in the run directory.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured root seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct RoundArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Round index, starting at 1.
    #[arg(long, default_value_t = 1)]
    pub round: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the unlabeled pool, the labeled training set and the probe set.
    Synth(RunArgs),
    /// Train and calibrate the target model on the training set.
    Train(RunArgs),
    /// Build the pruned pool from the target model.
    Prune(RunArgs),
    /// Draw the ensembles of a round.
    Ensembles(RoundArgs),
    /// Score the unlabeled pool with the target model and every ensemble.
    Score(RoundArgs),
    /// Select the gMAD pairs of a round from its score matrix.
    Gmad(RoundArgs),
    /// Collect ratings for a round's pairs and compute labels and cases.
    Label(RoundArgs),
    /// Serve a round's study to human raters.
    Serve {
        #[command(flatten)]
        round: RoundArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Fine-tune every model on the training set plus the labels so far.
    Rectify(RoundArgs),
    /// Run the whole loop, or one round with `--round`.
    Round {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        round: Option<usize>,
    },
    /// Rank the target model's snapshots against each other.
    Tournament(RunArgs),
    /// Compare gMAD sampling with active-learning selectors.
    Ablation(RunArgs),
    /// Write report.md from the run directory.
    Report(RunArgs),
}

/// Resolves the configuration for `args` and opens the run directory,
/// rejecting configuration drift.
pub fn open(args: &RunArgs) -> Result<(RunPaths, RunConfig)> {
    let manifest = RunPaths::new(&args.run).manifest();
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None if manifest.exists() => rounds::load_run(&args.run)?.1,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let paths = rounds::open_run(&args.run, &cfg)?;
    Ok((paths, cfg))
}

fn round_index(t: usize) -> Result<usize> {
    if t == 0 {
        return Err(Error::InvalidArgument("rounds are numbered from 1".into()).into());
    }
    Ok(t)
}

/// Runs one command and returns its JSON summary.
pub fn run(cmd: &Command) -> Result<Value> {
    match cmd {
        Command::Synth(a) => {
            let (paths, cfg) = open(a)?;
            let w = rounds::synth(&paths, &cfg)?;
            Ok(
                json!({ "pool": w.pool.len(), "train": w.train.len(), "probe": w.probe.len(), "train_labels": w.train_labels.len() }),
            )
        }
        Command::Train(a) => {
            let (paths, cfg) = open(a)?;
            let w = rounds::load_world(&paths)?;
            let f = rounds::train_target(&paths, &cfg, &w)?;
            Ok(json!({ "model": f.id, "parameters": f.params_flat().len() }))
        }
        Command::Prune(a) => {
            let (paths, cfg) = open(a)?;
            let w = rounds::load_world(&paths)?;
            let f = Model::load(&paths.models(0).join("f.json"))?;
            let pool = rounds::prune_stage(&paths, &cfg, &w, &f)?;
            let m = rounds::load_metrics(&paths, 0)?;
            Ok(
                json!({ "members": pool.len(), "flagged": m.pool.iter().filter(|p| p.flagged).count(), "probe_srcc": m.probe.srcc }),
            )
        }
        Command::Ensembles(a) => {
            let (paths, cfg) = open(&a.run)?;
            let specs = rounds::ensembles_stage(&paths, &cfg, round_index(a.round)?)?;
            Ok(json!({ "ensembles": specs.len() }))
        }
        Command::Score(a) => {
            let (paths, cfg) = open(&a.run)?;
            let w = rounds::load_world(&paths)?;
            let s = rounds::score_stage(&paths, &cfg, &w, round_index(a.round)?)?;
            Ok(json!({ "models": s.n_models(), "samples": s.n_samples() }))
        }
        Command::Gmad(a) => {
            let (paths, cfg) = open(&a.run)?;
            let t = round_index(a.round)?;
            let w = rounds::load_world(&paths)?;
            let scores = rounds::load_round_scores(&paths, t)?;
            let specs = rounds::load_ensembles(&paths, t)?;
            let set = rounds::gmad_stage(&paths, &cfg, &w, t, &scores, &specs)?;
            Ok(
                json!({ "pairs": set.pairs.len(), "duplicates": set.duplicates.len(), "images": set.images().len(), "warnings": set.warnings }),
            )
        }
        Command::Label(a) => {
            let (paths, cfg) = open(&a.run)?;
            let w = rounds::load_world(&paths)?;
            let out = rounds::label_stage(&paths, &cfg, &w, round_index(a.round)?)?;
            Ok(json!({
                "labels": out.labels.len(),
                "ratings": out.records.len(),
                "rejected_subjects": out.rejected_subjects,
                "excluded": out.excluded,
                "unlabeled_pairs": out.unlabeled_pairs.len(),
                "warnings": out.warnings,
            }))
        }
        Command::Serve { round, addr } => {
            let (paths, cfg) = open(&round.run)?;
            let t = round_index(round.round)?;
            let w = rounds::load_world(&paths)?;
            let study = Study::open(StudySetup {
                plan: rounds::study_plan(&paths, t)?,
                samples: w.pool,
                study_seed: rng::derive(cfg.seed, &format!("study/{t}")),
                min_subjects: cfg.subjects,
                ratings_path: server::ratings_path(&paths.round(t)),
            })?;
            let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
            runtime.block_on(server::serve(study.clone(), addr))?;
            let p = study.progress();
            Ok(json!({ "ratings": p.ratings, "complete": p.complete }))
        }
        Command::Rectify(a) => {
            let (paths, cfg) = open(&a.run)?;
            let w = rounds::load_world(&paths)?;
            let m = rounds::rectify_stage(&paths, &cfg, &w, round_index(a.round)?)?;
            Ok(serde_json::to_value(m)?)
        }
        Command::Round { run, round } => {
            let (paths, cfg) = open(run)?;
            match round {
                Some(t) => {
                    let w = rounds::load_world(&paths)?;
                    Ok(serde_json::to_value(rounds::run_round(
                        &paths,
                        &cfg,
                        &w,
                        round_index(*t)?,
                    )?)?)
                }
                None => {
                    let ms = rounds::run_all(&paths, &cfg)?;
                    Ok(json!(ms
                        .iter()
                        .map(|m| json!({ "round": m.round, "probe_srcc": m.probe.srcc, "pairs": m.pairs }))
                        .collect::<Vec<_>>()))
                }
            }
        }
        Command::Tournament(a) => {
            let (paths, cfg) = open(a)?;
            let w = rounds::load_world(&paths)?;
            Ok(serde_json::to_value(rounds::tournament_stage(&paths, &cfg, &w)?)?)
        }
        Command::Ablation(a) => {
            let (paths, cfg) = open(a)?;
            let w = rounds::load_world(&paths)?;
            Ok(serde_json::to_value(rounds::ablation_stage(&paths, &cfg, &w)?)?)
        }
        Command::Report(a) => {
            let (paths, _) = open(a)?;
            rounds::report_stage(&paths)?;
            Ok(json!({ "report": paths.report() }))
        }
    }
}
