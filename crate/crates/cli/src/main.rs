fn main() {
    std::process::exit(fedroam_cli::run(std::env::args_os()));
}
