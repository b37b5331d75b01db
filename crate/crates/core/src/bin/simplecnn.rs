fn main() {
    std::process::exit(simplecnn::cli::run(std::env::args_os()));
}
