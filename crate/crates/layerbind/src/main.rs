use clap::Parser;

use layerbind::cli::{run_cli, Cli};

fn main() {
    std::process::exit(run_cli(Cli::parse()));
}
