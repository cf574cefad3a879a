use clap::Parser;
use setreg_cli::{run, Cli};

fn main() {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("setreg: {e}");
        std::process::exit(e.exit_code());
    }
}
