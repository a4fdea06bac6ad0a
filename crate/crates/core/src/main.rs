fn main() {
    std::process::exit(pqf::cli::dispatch(std::env::args_os()));
}
