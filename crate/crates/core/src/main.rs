fn main() {
    std::process::exit(foresight::cli::main_with_args(std::env::args_os()));
}
