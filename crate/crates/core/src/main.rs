fn main() {
    std::process::exit(covlm_core::cli::run(std::env::args_os()));
}
