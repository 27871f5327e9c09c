fn main() {
    std::process::exit(rolldrop::cli::dispatch(std::env::args_os()));
}
