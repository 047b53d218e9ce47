fn main() {
    std::process::exit(trajid_core::cli::run(std::env::args_os()));
}
