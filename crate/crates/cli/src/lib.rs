//! Library surface of the `atlseg` binary, exposed so integration tests can
//! drive commands directly.

pub mod commands;
pub mod config;

pub use commands::{
    closed_form_counts, cmd_ablate, cmd_count_params, cmd_eval, cmd_gradcheck, cmd_predict,
    cmd_train, CliError,
};
pub use config::RunConfig;
