fn main() {
    env_logger::init();
    std::process::exit(nlsls::cli::run(std::env::args_os()));
}
