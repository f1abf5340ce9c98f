#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A world small enough for a full loop in a few seconds.
pub const SMALL: &str = r#"
pool_size = 1500
train_size = 400
probe_size = 200
hidden = [12]
train_epochs = 8
train_lr = 0.01
pool_lr = 0.01
pool_epochs = 2
finetune_epochs = 2
slimming_warmup_epochs = 1
criteria = ["omp", "l1-filter", "fpgm"]
ratios = [0.3, 0.5]
ensemble_size = 3
ensembles = 6
tournament_pairs_per_level = 4
ablation_budget = 40
"#;

pub fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, format!("{SMALL}{extra}\n")).unwrap();
    path
}

pub fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iqa-troubleshoot"))
        .args(args)
        .output()
        .expect("spawn cli")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}
