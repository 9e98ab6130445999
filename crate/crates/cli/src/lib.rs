//! Command-line front end for the forecasting engine.
//!
//! Exit codes: 0 success, 2 usage error, 1 runtime error. Every CSV written
//! here ends with a `# seed=…, mode=…` comment line.

pub mod args;
pub mod bench_conv;
pub mod bench_loader;
pub mod eval;
pub mod gen_data;
pub mod report;
pub mod stats;
pub mod train;

pub use args::{Cli, Command};

/// A flag value that parses but is not acceptable; exits with code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data::run(&a),
        Command::BenchConv(a) => bench_conv::run(&a),
        Command::BenchLoader(a) => bench_loader::run(&a),
        Command::Train(a) => train::run(&a),
        Command::Eval(a) => eval::run(&a),
    }
}
