use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = mgnet::cli::Cli::parse();
    if let Err(e) = mgnet::cli::run(cli) {
        eprintln!("error: {}", mgnet::cli::one_line(&e));
        std::process::exit(1);
    }
}
