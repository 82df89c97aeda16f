fn main() {
    std::process::exit(favae::cli::run(std::env::args_os()));
}
