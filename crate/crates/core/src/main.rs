fn main() {
    std::process::exit(lrc::cli::cli_dispatch(std::env::args_os()));
}
