fn main() {
    std::process::exit(hetlm::cli::run(std::env::args_os()));
}
