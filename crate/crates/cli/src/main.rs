fn main() {
    std::process::exit(sacflow_cli::run_command(std::env::args_os()));
}
