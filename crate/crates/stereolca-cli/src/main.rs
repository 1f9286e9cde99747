fn main() {
    std::process::exit(stereolca_cli::run(std::env::args_os()));
}
