use clap::Parser;
use pdraft_cli::commands::{dispatch, Cli};
use pdraft_cli::harness::UsageError;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.cmd) {
        eprintln!("error: {e:#}");
        let code = if e.is::<UsageError>() { 2 } else { 3 };
        std::process::exit(code);
    }
}
