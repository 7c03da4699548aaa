fn main() {
    std::process::exit(tfvaegan::cli::run());
}
