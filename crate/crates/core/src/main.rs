fn main() {
    std::process::exit(attngen::cli::run(std::env::args_os()));
}
