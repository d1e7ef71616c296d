fn main() {
    std::process::exit(endurance::cli::main());
}
