use std::process::ExitCode;

use clap::Parser;
use upl_cli::cli::Cli;
use upl_cli::commands::{self, Outcome};
use upl_core::Error;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Parse { .. } => 2,
                Error::Io { .. } => 3,
                Error::EnumerationBound { .. } => 4,
                _ => 1,
            })
        }
    }
}
