fn main() {
    std::process::exit(qforge_cli::main_with(std::env::args_os()));
}
