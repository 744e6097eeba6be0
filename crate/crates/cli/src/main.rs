fn main() {
    std::process::exit(gea_cli::run_command(std::env::args_os()));
}
