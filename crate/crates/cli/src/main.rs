fn main() {
    std::process::exit(u4d_cli::run_command(std::env::args_os()));
}
