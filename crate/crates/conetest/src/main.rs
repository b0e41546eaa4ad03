fn main() {
    std::process::exit(conetest::cli::run(std::env::args_os()));
}
