fn main() {
    std::process::exit(diffnar::cli::dispatch(std::env::args_os()));
}
