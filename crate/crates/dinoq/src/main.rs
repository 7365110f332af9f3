fn main() {
    std::process::exit(dinoq::cli::run_cli(std::env::args_os()));
}
