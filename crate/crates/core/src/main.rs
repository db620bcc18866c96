fn main() {
    std::process::exit(magtomo::cli::run(std::env::args_os()));
}
