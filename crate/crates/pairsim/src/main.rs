fn main() {
    std::process::exit(pairsim::cli::main_with_args(std::env::args_os()));
}
