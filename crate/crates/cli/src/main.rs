fn main() {
    std::process::exit(netident_cli::execute(std::env::args_os()));
}
