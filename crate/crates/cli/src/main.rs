fn main() {
    std::process::exit(capdma_cli::main_with(std::env::args_os()));
}
