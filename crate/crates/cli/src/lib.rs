//! Command-line front end for the deadline-aware routing toolkit.

pub mod args;
pub mod commands;
pub mod error;
pub mod svg;
pub mod trace;

pub use args::{Cli, Command};
pub use error::{CliError, CliResult};

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(a) => commands::generate(&a).map(drop),
        Command::Train(a) => commands::train_cmd(&a).map(drop),
        Command::Solve(a) => commands::solve_cmd(&a).map(drop),
        Command::Benchmark(a) => commands::benchmark_cmd(&a).map(drop),
        Command::Plot(a) => commands::plot_cmd(&a),
    }
}
