fn main() {
    std::process::exit(ecm::cli::run(std::env::args_os()));
}
