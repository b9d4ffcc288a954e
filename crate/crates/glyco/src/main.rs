fn main() {
    std::process::exit(glyco::cli::run(std::env::args_os()));
}
