use std::process::ExitCode;

use clap::Parser;

use cnmm_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(failure) => {
            eprint!("{}", failure.message());
            if !failure.message().ends_with('\n') {
                eprintln!();
            }
            ExitCode::from(failure.exit_code())
        }
    }
}
