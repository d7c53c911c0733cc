fn main() {
    std::process::exit(netwave_cli::run());
}
