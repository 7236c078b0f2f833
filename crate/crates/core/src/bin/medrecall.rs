fn main() {
    std::process::exit(medrecall::cli::main_with(std::env::args_os()));
}
