fn main() {
    std::process::exit(hetcoef::cli::run(std::env::args_os()));
}
