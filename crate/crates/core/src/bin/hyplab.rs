fn main() {
    std::process::exit(hyplab::cli::main_with_args(std::env::args_os()));
}
