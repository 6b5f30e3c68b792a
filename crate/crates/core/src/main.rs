use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ADAFED_LOG", "warn")).init();
    let cli = adafed::cli::Cli::parse();
    std::process::exit(adafed::cli::main_with(cli));
}
