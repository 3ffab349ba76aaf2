fn main() {
    std::process::exit(cscr::cli::main_with_args(std::env::args_os()));
}
