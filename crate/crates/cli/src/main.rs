use std::process::ExitCode;

use clap::Parser;

use crossfuse_cli::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
