fn main() {
    std::process::exit(qfilters::cli::run_cli(std::env::args_os()));
}
