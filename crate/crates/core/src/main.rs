fn main() {
    std::process::exit(coagkin::cli::run_from_args(std::env::args_os()));
}
