fn main() {
    std::process::exit(gated::cli::main());
}
