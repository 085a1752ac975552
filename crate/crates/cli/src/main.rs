fn main() {
    std::process::exit(sqfc_cli::run(std::env::args_os()));
}
