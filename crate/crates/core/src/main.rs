fn main() {
    gsa::cli::init_logging();
    std::process::exit(gsa::cli::run_command(std::env::args_os()));
}
