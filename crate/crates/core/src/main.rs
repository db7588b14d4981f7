fn main() {
    std::process::exit(ammunet::cli::main());
}
