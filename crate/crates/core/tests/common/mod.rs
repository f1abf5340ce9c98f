#![allow(dead_code)]

pub mod gmad;
pub mod metrics;
pub mod pruning;
pub mod screening;

use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

/// Property runner with a fixed seed and no failure file, usable outside
/// the test harness.
pub fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}
