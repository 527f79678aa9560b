use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    bimtwin_service::cli::run(bimtwin_service::cli::Cli::parse())
}
