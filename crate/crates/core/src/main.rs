use clap::Parser;

use cigmo::cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let code = e.exit_code();
        eprintln!("error: {:#}", anyhow::Error::new(e));
        std::process::exit(code);
    }
}
