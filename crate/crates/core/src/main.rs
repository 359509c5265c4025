fn main() {
    std::process::exit(mdmica::cli::main_with_args(std::env::args_os()));
}
