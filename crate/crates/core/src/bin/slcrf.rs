fn main() {
    std::process::exit(slcrf::cli::run(std::env::args_os()));
}
