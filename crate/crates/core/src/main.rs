fn main() {
    std::process::exit(pcdp::cli::main_with_args(std::env::args_os()));
}
