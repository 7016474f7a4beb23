//! Library surface of the `infomap` command-line tool, exposed so
//! integration tests can drive the pipeline in-process.

pub mod commands;
pub mod config;

pub use commands::{cmd_calibrate, cmd_explain, cmd_synth_data, cmd_train_backbone, cmd_train_milr};
pub use config::RunConfig;
