mod args;
mod commands;
mod render;

use std::process::ExitCode;

use clap::Parser;
use ocdd::Error;

use args::{Cli, Command};

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 1,
        Error::Usage(_) | Error::Config(_) | Error::Shape(_) | Error::Format(_) | Error::Contract(_) | Error::Json(_) => 2,
        Error::Numeric(_) | Error::Simulation(_) => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    ocdd::pipeline::init_threads_from_env();

    let argv: Vec<_> = std::env::args_os().collect();
    let argv = match args::merge_config(&argv) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };

    let seed = cli.seed;
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a, seed),
        Command::Train(a) => commands::train_cmd(a, seed),
        Command::Sample(a) => commands::sample_cmd(a, seed),
        Command::Eval(a) => commands::eval_cmd(a, seed),
        Command::Render(a) => commands::render_cmd(a, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
