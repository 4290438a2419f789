fn main() {
    std::process::exit(spdhg::harness::cli::main_with_args(std::env::args_os()));
}
