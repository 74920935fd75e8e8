fn main() {
    std::process::exit(cplab::cli::main());
}
