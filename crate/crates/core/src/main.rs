fn main() {
    std::process::exit(scoda::cli::main_with(std::env::args_os()));
}
