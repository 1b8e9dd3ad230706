fn main() {
    std::process::exit(fieldgen::cli::run(std::env::args_os()));
}
