fn main() {
    std::process::exit(gpalm::cli::run());
}
