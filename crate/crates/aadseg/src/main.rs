fn main() {
    std::process::exit(aadseg::cli::run(std::env::args()));
}
