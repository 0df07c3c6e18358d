//! `opsc` command-line pipeline: disassembly, corpus preparation, language
//! model pretraining, classifier fine-tuning, evaluation and prediction.

pub mod args;
pub mod commands;
pub mod error;
pub mod prep_dir;

use std::io::Write;
use std::path::PathBuf;

pub use args::{Cli, Command};
pub use error::{CliError, CliResult, ExitCode};
use opsc_core::config::RunConfig;

/// Output directory for a command: `--out`, else `$OPSC_OUT/<command>`,
/// else `runs/<command>`.
pub fn output_dir(cli: &Cli) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    let root = std::env::var_os(args::OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(cli.command.name())
}

/// Effective configuration: the `--config` file (or defaults) with `--seed`
/// applied.
pub fn effective_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli, stdout: &mut dyn Write) -> CliResult<()> {
    let mut ctx = commands::Context {
        config: effective_config(cli)?,
        out: output_dir(cli),
        stdout,
    };
    match &cli.command {
        Command::Disasm(a) => commands::disasm(&mut ctx, a),
        Command::Synth(a) => commands::synth(&mut ctx, a),
        Command::Prep(a) => commands::prep(&mut ctx, a),
        Command::Split(a) => commands::split(&mut ctx, a),
        Command::LrFind(a) => commands::lr_find_cmd(&mut ctx, a),
        Command::TrainLm(a) => commands::train_lm_cmd(&mut ctx, a),
        Command::TrainClf(a) => commands::train_clf_cmd(&mut ctx, a),
        Command::Eval(a) => commands::eval(&mut ctx, a),
        Command::Predict(a) => commands::predict(&mut ctx, a),
    }
}
