fn main() {
    std::process::exit(gsaf_core::cli::run(std::env::args_os()));
}
