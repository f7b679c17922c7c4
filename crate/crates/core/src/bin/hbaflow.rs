fn main() {
    std::process::exit(hba_flow::cli::run(std::env::args_os()));
}
