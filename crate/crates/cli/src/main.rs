use clap::Parser;
use lanepilot_cli::commands::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("{}", e.line());
        std::process::exit(1);
    }
}
