use std::process::ExitCode;

use clap::Parser;

use dpua_cli::cli::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dpua_cli::commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.failure.exit_code())
        }
    }
}
