use clap::Parser;
use saits::cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    run(Cli::parse())
}
