fn main() {
    std::process::exit(convsplat_cli::run(std::env::args_os()));
}
