fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VSR_LOG", "info")).init();
    std::process::exit(vsr_cli::run(std::env::args_os()));
}
