use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = krfd::cli::Cli::parse();
    if let Err(e) = krfd::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(krfd::cli::exit_code(&e));
    }
}
