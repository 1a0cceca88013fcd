fn main() {
    std::process::exit(bla::cli::run(std::env::args_os()));
}
