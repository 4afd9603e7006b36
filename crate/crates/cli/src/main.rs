fn main() {
    std::process::exit(pahs_cli::run(std::env::args_os()));
}
