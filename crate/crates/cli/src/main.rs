fn main() {
    std::process::exit(heart2mind_cli::run(std::env::args_os()));
}
