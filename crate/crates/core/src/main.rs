fn main() {
    std::process::exit(remprop::cli::run(std::env::args_os()));
}
