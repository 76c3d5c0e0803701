fn main() {
    std::process::exit(remask::cli::main_with_args(std::env::args_os()));
}
