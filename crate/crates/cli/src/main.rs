fn main() {
    std::process::exit(toda_cli::run_cli(std::env::args_os()));
}
