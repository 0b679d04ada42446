fn main() {
    std::process::exit(visicrit_cli::run(std::env::args_os(), true));
}
