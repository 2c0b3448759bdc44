fn main() {
    std::process::exit(lensground_service::cli::run(std::env::args_os()));
}
