fn main() {
    std::process::exit(ptw_cli::run(std::env::args_os()));
}
