fn main() {
    std::process::exit(atavism::cli::main_with_args(std::env::args_os()));
}
