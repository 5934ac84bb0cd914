use clap::Parser;
use tamd_lab::cli::{main_with, CliArgs};

fn main() {
    let args = CliArgs::parse();
    if let Err(e) = main_with(args) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
