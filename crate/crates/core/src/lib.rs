//! Troubleshooting harness for blind image-quality regressors: pruned
//! self-competitor ensembles, level-constrained gMAD pair selection,
//! simulated or live subjective labeling, and multi-round rectification.

pub mod baselines;
pub mod config;
pub mod datapool;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod gmad;
pub mod io;
pub mod model;
pub mod pruning;
pub mod rng;
pub mod rounds;
pub mod scores;
pub mod subjective;

pub use error::{Error, Result};
