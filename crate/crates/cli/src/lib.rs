//! Command-line front end: preprocessing, bias inspection, toy training and
//! generation.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_generate, cmd_inspect_bias, cmd_preprocess, cmd_train_toy, DumpFormat, InspectRequest,
};
pub use config::RunConfig;

/// Process exit status for a failed command: 1 for bad input, 2 for
/// internal failures.
pub fn exit_code(err: &synloc_core::Error) -> i32 {
    if err.is_input_error() {
        1
    } else {
        2
    }
}
