fn main() {
    std::process::exit(vlad::cli::run(std::env::args_os()));
}
