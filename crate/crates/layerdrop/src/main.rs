fn main() {
    std::process::exit(layerdrop::cli::run(std::env::args().skip(1)));
}
