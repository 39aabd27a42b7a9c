fn main() {
    std::process::exit(purls::cli::run(std::env::args_os()));
}
