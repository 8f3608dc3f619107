//! Library side of the `edgefill` command: configuration, run directories,
//! reports and the work behind each subcommand.

pub mod commands;
pub mod config;
pub mod report;
pub mod run;

pub use config::RunConfig;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const USAGE: i32 = 2;
}

/// Maps an error to its exit code: problems with the caller's inputs,
/// files or configuration give 2, everything else 1.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use edgefill_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Parse { .. }
                | E::Malformed { .. }
                | E::Unsupported(_)
                | E::Config(_)
                | E::Checkpoint(_)
                | E::Data(_)
                | E::Mask(_)
                | E::Io(_) => exit::USAGE,
                E::Shape(_) | E::Domain(_) | E::Diverged(_) => exit::INTERNAL,
            };
        }
        if cause.is::<std::io::Error>() {
            return exit::USAGE;
        }
    }
    exit::INTERNAL
}
