fn main() {
    std::process::exit(pqid::cli::run(std::env::args_os()));
}
