use clap::Parser;

use gd_tool::commands::{run, Cli};

fn main() {
    if let Some(n) = std::env::var("GD_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // only fails if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("gd: {e}");
        std::process::exit(e.exit_code());
    }
}
