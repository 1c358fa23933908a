fn main() {
    std::process::exit(nestfuse::cli::run());
}
