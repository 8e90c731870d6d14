fn main() {
    std::process::exit(mgaug::cli::run(std::env::args_os()));
}
