use bhchain_cli::{execute, Cli};
use clap::Parser;

fn main() {
    let cli = Cli::parse();
    std::process::exit(execute(&cli));
}
