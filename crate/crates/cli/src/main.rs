fn main() {
    std::process::exit(pehmqc_cli::run_from_args(std::env::args_os()));
}
