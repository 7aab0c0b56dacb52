fn main() {
    std::process::exit(stws_cli::run());
}
