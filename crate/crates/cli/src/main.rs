use std::process::ExitCode;

use clap::Parser;
use graphae_cli::commands::{run, Cli};

/// Usage errors exit with 2 from clap; everything else that fails exits with 1.
fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
