//! Configuration, pipeline orchestration, experiments and report files for
//! the `mbmeval` command.

pub mod config;
pub mod experiment;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use experiment::{run_experiment, ExperimentReport};
pub use pipeline::{load_inputs, Cache, Inputs, Pipeline};
pub use report::Report;
