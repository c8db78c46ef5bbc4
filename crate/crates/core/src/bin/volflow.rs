fn main() {
    std::process::exit(volflow::cli::run(std::env::args_os()));
}
