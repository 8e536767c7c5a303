fn main() {
    std::process::exit(switchbsde::cli::run(std::env::args()));
}
