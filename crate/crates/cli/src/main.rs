use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TONEMDD_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = tonemdd_cli::Cli::parse();
    if let Err(e) = tonemdd_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
