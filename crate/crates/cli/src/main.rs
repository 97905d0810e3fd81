fn main() {
    std::process::exit(stefan_cli::main_with_args(std::env::args_os()));
}
