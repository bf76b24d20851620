use clap::Parser;
use enkmp::cli::{run, Cli};

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("enkmp: {e}");
        std::process::exit(e.code);
    }
}
