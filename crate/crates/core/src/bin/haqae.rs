fn main() {
    std::process::exit(haqae::cli::run(std::env::args_os()));
}
