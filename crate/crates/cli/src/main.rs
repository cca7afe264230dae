fn main() {
    std::process::exit(lrpost_cli::main_with(std::env::args_os(), std::env::vars()));
}
