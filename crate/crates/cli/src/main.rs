//! `mirror-align`: generate synthetic data, train task models, probe their
//! alignment and emit reports.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 when the command
//! fails at run time.

mod args;
mod commands;
mod manifest;
mod settings;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};

/// Long flags accepted by the subcommand named in `argv`, if any.
fn valid_flags(argv: &[String]) -> Option<(String, Vec<String>)> {
    let cmd = args::Cli::command();
    let sub = argv.iter().skip(1).find_map(|a| cmd.find_subcommand(a))?;
    let flags = sub
        .get_arguments()
        .chain(cmd.get_arguments())
        .filter_map(|a| a.get_long().map(|l| format!("--{l}")))
        .collect();
    Some((sub.get_name().to_string(), flags))
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match args::Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                kind => {
                    if kind == ErrorKind::UnknownArgument {
                        if let Some((name, flags)) = valid_flags(&argv) {
                            eprintln!("valid flags for {name}: {}", flags.join(", "));
                        }
                    }
                    ExitCode::from(1)
                }
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
