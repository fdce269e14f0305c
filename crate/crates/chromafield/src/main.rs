fn main() {
    std::process::exit(chromafield::cli::main());
}
