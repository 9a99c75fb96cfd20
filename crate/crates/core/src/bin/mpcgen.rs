use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = mpcgen::cli::Cli::parse();
    match mpcgen::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
