//! Library side of the `mc2` command: configuration parsing and the
//! subcommand bodies, kept out of `main` so tests can drive them.

pub mod commands;
pub mod config;

pub use config::{parse_config, RunConfig};

/// Process exit status for an error chain: 2 for configuration problems,
/// 3 for numeric failures, 4 for degenerate inputs under `--strict`, and 1
/// for anything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use mc2_core::Error;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            match e {
                Error::Config { .. }
                | Error::UnknownStrategy { .. }
                | Error::UnknownWord(_)
                | Error::UnknownTokenId(_) => return 2,
                e if e.is_numeric() => return 3,
                _ => {}
            }
        }
        if cause.is::<commands::CheckFailed>() {
            return 3;
        }
        if cause.is::<commands::Degenerate>() {
            return 4;
        }
    }
    1
}
