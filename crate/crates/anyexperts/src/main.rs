fn main() {
    std::process::exit(anyexperts::cli::run(std::env::args()));
}
