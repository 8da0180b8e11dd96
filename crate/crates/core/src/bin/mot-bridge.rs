fn main() {
    std::process::exit(mot_bridge::cli::main_with_args(std::env::args_os()));
}
