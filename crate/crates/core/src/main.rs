fn main() {
    std::process::exit(simcore::cli::run(std::env::args_os()));
}
