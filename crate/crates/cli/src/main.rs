mod args;
mod commands;

use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};
use imim_core::Error as CoreError;

use args::{Cli, Command};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn jobs(cmd: &Command) -> Option<usize> {
    match cmd {
        Command::Synth(a) => a.run.jobs,
        Command::Pretrain(a) => a.run.jobs,
        Command::Eval(a) => a.run.jobs,
        Command::Sweep(a) => a.run.jobs,
        Command::Reconstruct(a) => a.run.jobs,
        Command::ExportEncoder(_) | Command::Gradcheck(_) => None,
    }
}

/// Config mistakes are reported as usage errors.
fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| matches!(c.downcast_ref::<CoreError>(), Some(CoreError::Config(_))))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let sub = matches.subcommand().expect("subcommand is required").1;

    if let Some(n) = jobs(&cli.command) {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not size the thread pool: {e}");
        }
    }

    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a, sub),
        Command::Pretrain(a) => commands::pretrain(a, sub),
        Command::ExportEncoder(a) => commands::export(a),
        Command::Eval(a) => commands::eval(a, sub),
        Command::Sweep(a) => commands::sweep(a, sub),
        Command::Gradcheck(a) => match commands::gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(EXIT_RUNTIME),
            Err(e) => Err(e),
        },
        Command::Reconstruct(a) => commands::reconstruct_cmd(a, sub),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}
