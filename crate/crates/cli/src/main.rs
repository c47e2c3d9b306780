use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = driftbench_cli::Cli::parse();
    match driftbench_cli::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(driftbench_cli::exit_code(&e))
        }
    }
}
