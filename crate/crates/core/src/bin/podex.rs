use clap::Parser;
use podex::cli::{execute, Cli};

fn main() {
    std::process::exit(execute(Cli::parse()));
}
