fn main() {
    std::process::exit(gdgat_core::cli::run_cli(std::env::args_os()));
}
