fn main() {
    std::process::exit(quantkit::cli::run(std::env::args_os()));
}
