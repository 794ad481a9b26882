fn main() {
    std::process::exit(srl_cli::run(std::env::args_os()));
}
