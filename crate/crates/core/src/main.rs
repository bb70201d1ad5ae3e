fn main() {
    std::process::exit(missmarple::cli::run(std::env::args_os()));
}
