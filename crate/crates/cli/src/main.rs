fn main() {
    std::process::exit(letf_lab_cli::run(std::env::args_os()));
}
