use clap::Parser;
use lace_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout();
    if let Err(e) = run(&cli, &mut stdout) {
        eprintln!("lace: {e}");
        std::process::exit(e.exit_code());
    }
}
