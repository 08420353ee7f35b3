use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};

use anrot::cli::Cli;
use anrot::config::keys_help;
use anrot::run::dispatch;

fn main() -> ExitCode {
    let command = Cli::command().after_help(keys_help());
    let matches = match command.try_get_matches() {
        Ok(m) => m,
        // clap exits 0 for --help/--version and 2 for usage errors.
        Err(e) => e.exit(),
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}
