fn main() {
    std::process::exit(hdmo::cli::main_with_args(std::env::args_os()));
}
