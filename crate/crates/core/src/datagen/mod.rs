//! Synthetic benchmark generation and semi-synthetic loaders.

mod dataset;
pub mod io;
mod semi;
mod synthetic;

pub use dataset::{ColumnRole, Dataset, OutcomeKind};
pub use semi::{
    load_semi_synthetic, prepare_semi_synthetic, weighted_quota, Schema, SemiSplit,
    IHDP_CONTINUOUS, TWINS_INSTRUMENTS, TWINS_UNSTABLE,
};
pub use synthetic::{
    biased_sample, env_suite, generate_pool, generate_population, log_selection_probs,
    sample_environment, split_train_val, EnvSpec, EnvSuite, Environment, GenParams, SuiteOptions,
    SynConfig, DEFAULT_RHO_GRID,
};
