use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = dynacal::Cli::parse();
    match dynacal::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
