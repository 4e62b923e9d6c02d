fn main() {
    std::process::exit(pra_cli::run(std::env::args()));
}
