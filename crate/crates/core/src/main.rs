fn main() {
    std::process::exit(egt_core::cli::run(std::env::args_os()));
}
