fn main() {
    std::process::exit(voi_twin_cli::run_command(std::env::args_os()));
}
