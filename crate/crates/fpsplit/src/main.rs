use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = fpsplit::cli::Cli::parse();
    let code = fpsplit::cli::execute(&cli, &mut std::io::stdout());
    std::process::exit(code);
}
