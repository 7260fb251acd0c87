fn main() {
    std::process::exit(asiseg::cli::main_with_args(std::env::args_os()));
}
