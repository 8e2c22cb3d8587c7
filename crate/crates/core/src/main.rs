fn main() {
    std::process::exit(jachess::cli::run(std::env::args_os()));
}
