fn main() {
    std::process::exit(dcfm::cli::run(std::env::args_os()));
}
