fn main() {
    std::process::exit(refshape::cli::run(std::env::args_os()));
}
