use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = tridira::cli::Cli::parse();
    match tridira::cli::run(cli, &mut std::io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
