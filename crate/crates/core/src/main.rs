fn main() {
    std::process::exit(projsim::cli::run(std::env::args_os()));
}
