fn main() {
    std::process::exit(apd_cli::run(std::env::args_os()));
}
