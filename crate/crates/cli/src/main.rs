fn main() {
    std::process::exit(blockxfer_cli::run(std::env::args_os()));
}
