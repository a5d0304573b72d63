fn main() {
    std::process::exit(lcad::cli::run());
}
