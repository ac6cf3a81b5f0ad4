fn main() {
    std::process::exit(ncttt_cli::run(std::env::args_os()));
}
