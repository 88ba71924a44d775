fn main() {
    std::process::exit(instancegm::cli::main_with_args(std::env::args_os()));
}
