fn main() {
    std::process::exit(gazemd_cli::run(std::env::args_os()));
}
