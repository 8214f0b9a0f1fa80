fn main() {
    std::process::exit(lcm::cli::main());
}
