fn main() {
    std::process::exit(cutts::cli::run(std::env::args_os()));
}
