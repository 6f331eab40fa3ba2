use std::process::ExitCode;

use clap::Parser;
use gaf_cli::{execute, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(outcome) => {
            println!("{}", outcome.stdout.trim_end());
            log::info!("manifest {}", outcome.manifest_path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
