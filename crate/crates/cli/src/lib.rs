//! Command implementations behind the `crackseg` binary.

pub mod commands;
pub mod config;
pub mod render;

pub use commands::{cmd_ablate, cmd_eval, cmd_predict, cmd_profile, cmd_train, cmd_visualize};
pub use config::{BackendSpec, RunConfig};
