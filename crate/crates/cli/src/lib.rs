//! Command-line front end: one subcommand per pipeline stage, plus the
//! annotation service for live studies.

pub mod commands;
pub mod render;
pub mod server;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const DATA: i32 = 4;
    pub const INCOMPLETE_STUDY: i32 = 5;
}

/// Exit code for an error raised by a command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use iqa_troubleshoot::Error;
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => exit::CONFIG,
        Some(Error::IncompleteStudy { .. }) => exit::INCOMPLETE_STUDY,
        Some(_) => exit::DATA,
        None => exit::FAILURE,
    }
}
