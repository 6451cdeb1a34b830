fn main() {
    std::process::exit(tlspec::cli::main_with_args(std::env::args_os()));
}
