//! `lesionkit` command-line entry point.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 I/O failure.

mod args;
mod commands;
mod support;

use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};

use args::Cli;

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                _ => {
                    let rendered = e.render().to_string();
                    let first = rendered.lines().next().unwrap_or("invalid arguments");
                    eprintln!("{first} (see --help)");
                    ExitCode::from(1)
                }
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match commands::run(cli, &matches) {
        Ok(code) => code,
        Err(e) => {
            let message: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", dedup_chain(&message));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 when any cause is a filesystem error, 1 otherwise.
fn exit_code(e: &anyhow::Error) -> u8 {
    let io = e.chain().any(|c| {
        c.downcast_ref::<std::io::Error>().is_some()
            || c.downcast_ref::<lesionkit::Error>()
                .is_some_and(|l| l.is_io())
    });
    if io {
        2
    } else {
        1
    }
}

/// Joins an error chain on one line, dropping causes already quoted by
/// their parent's message.
fn dedup_chain(parts: &[String]) -> String {
    let mut out: Vec<&str> = Vec::new();
    for p in parts {
        if out.last().is_some_and(|prev| prev.contains(p.as_str())) {
            continue;
        }
        out.push(p);
    }
    out.join(": ")
}
