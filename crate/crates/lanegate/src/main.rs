fn main() {
    std::process::exit(lanegate::cli::run(std::env::args_os()));
}
