fn main() {
    std::process::exit(visenc_cli::run(std::env::args_os()));
}
