fn main() {
    let code = cras::cli::run(std::env::args_os());
    std::process::exit(code);
}
