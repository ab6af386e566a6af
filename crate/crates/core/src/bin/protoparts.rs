fn main() {
    std::process::exit(protoparts::cli::main_with(std::env::args_os()));
}
