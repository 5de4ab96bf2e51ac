fn main() {
    std::process::exit(relsparse::cli::main());
}
