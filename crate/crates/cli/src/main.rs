fn main() {
    std::process::exit(snfl_cli::run());
}
