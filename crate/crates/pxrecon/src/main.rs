fn main() {
    std::process::exit(pxrecon::cli::main_with(std::env::args_os()));
}
