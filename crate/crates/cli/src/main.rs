fn main() {
    std::process::exit(macrl_cli::run(std::env::args_os()));
}
