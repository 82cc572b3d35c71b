fn main() {
    std::process::exit(capbox::cli::run(std::env::args_os()));
}
