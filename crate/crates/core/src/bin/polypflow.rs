fn main() {
    std::process::exit(polypflow_core::cli::run(std::env::args_os()));
}
