fn main() {
    std::process::exit(idoc::cli::cli_main(std::env::args_os()));
}
