fn main() {
    std::process::exit(boxforge::cli::main_with_args(std::env::args_os()));
}
