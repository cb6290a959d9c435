fn main() {
    std::process::exit(irvox::cli::run(std::env::args().collect()));
}
