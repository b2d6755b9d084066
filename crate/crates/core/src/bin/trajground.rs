fn main() {
    std::process::exit(trajground::cli::run(std::env::args_os()));
}
