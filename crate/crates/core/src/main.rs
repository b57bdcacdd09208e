fn main() {
    std::process::exit(hfmca::cli::run(std::env::args_os()));
}
