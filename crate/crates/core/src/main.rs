fn main() {
    std::process::exit(feedersim::cli::run(std::env::args_os()));
}
