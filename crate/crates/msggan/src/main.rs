use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
    let cli = msggan::cli::Cli::parse();
    if let Err(e) = msggan::cli::run(cli) {
        eprintln!("error: {}", e);
        std::process::exit(1);
    }
}
