fn main() {
    std::process::exit(wfsep::cli::main_with(std::env::args_os()));
}
