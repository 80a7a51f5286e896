fn main() {
    std::process::exit(peerspread::cli::main());
}
