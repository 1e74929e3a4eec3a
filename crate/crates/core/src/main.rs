fn main() {
    std::process::exit(onn_core::cli::run(std::env::args_os()));
}
