use clap::Parser;
use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = specdiff_cli::Cli::parse();
    match specdiff_cli::run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
