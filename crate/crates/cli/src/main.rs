use std::process::ExitCode;

use clap::Parser;
use memsnn::ErrorClass;

mod app;

use app::{Cli, CliError};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match app::run(cli, std::env::args().skip(1).collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 1,
                CliError::Core(ref c) => match c.class() {
                    ErrorClass::Usage => 1,
                    ErrorClass::Data => 2,
                    ErrorClass::Numeric => 3,
                },
                CliError::Output(_) => 2,
            })
        }
    }
}
