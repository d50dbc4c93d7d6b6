fn main() {
    std::process::exit(relit::cli::run_command(std::env::args_os()));
}
