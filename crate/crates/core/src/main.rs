fn main() {
    std::process::exit(tcan::cli::run(std::env::args_os()));
}
