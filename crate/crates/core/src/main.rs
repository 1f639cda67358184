fn main() {
    std::process::exit(dvconv::cli::run(std::env::args_os()));
}
