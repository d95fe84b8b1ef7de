fn main() {
    std::process::exit(ibowimg::cli::run(std::env::args_os()));
}
