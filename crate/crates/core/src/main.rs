fn main() {
    std::process::exit(lmlab::cli::run(std::env::args_os()));
}
