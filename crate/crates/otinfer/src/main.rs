fn main() {
    let code = otinfer::cli::run(std::env::args().collect());
    std::process::exit(code);
}
