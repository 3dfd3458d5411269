fn main() {
    std::process::exit(maskattn_cli::run(std::env::args_os()));
}
