fn main() {
    std::process::exit(phraseforge::cli::run(std::env::args_os()));
}
