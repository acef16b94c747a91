fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    tilereg::cli::configure_threads();
    std::process::exit(tilereg::cli::run(std::env::args_os()));
}
