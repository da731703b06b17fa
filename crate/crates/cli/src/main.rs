fn main() {
    std::process::exit(osod_cli::run(std::env::args_os()));
}
