fn main() {
    env_logger::Builder::new().filter_level(log::LevelFilter::Info).init();
    std::process::exit(angular_lt::cli::main_with_args(std::env::args_os()));
}
