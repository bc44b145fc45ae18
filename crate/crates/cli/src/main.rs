//! `evlabel`: offline pseudo-label refinement from the command line.

mod commands;

use std::process::ExitCode;

use clap::Parser;

use commands::Cli;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report("invalid-input", &e.to_string());
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(e.code(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}

fn report(code: &str, message: &str) {
    let body = serde_json::json!({ "error": code, "message": message.trim_end() });
    eprintln!("{body}");
}
