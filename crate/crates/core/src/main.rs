fn main() {
    std::process::exit(hiertail::cli::dispatch(std::env::args_os()));
}
