fn main() {
    std::process::exit(modrl_cli::run(std::env::args_os()));
}
