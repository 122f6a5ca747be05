fn main() {
    std::process::exit(eventchain::cli::run(std::env::args_os()));
}
