use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = wg_cli::Cli::parse();
    if let Err(e) = wg_cli::run_cli(&cli) {
        eprintln!("error: {e}");
        std::process::exit(wg_cli::exit_code(&e));
    }
}
