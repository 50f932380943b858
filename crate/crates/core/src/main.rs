fn main() {
    std::process::exit(trackvel::cli::run(std::env::args_os()));
}
