fn main() {
    std::process::exit(vitexpand::cli::cli_main(std::env::args_os()));
}
