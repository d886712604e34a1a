fn main() {
    std::process::exit(depthprune::cli::main_with_args(std::env::args_os()));
}
