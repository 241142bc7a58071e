fn main() {
    let code = mixpanel::cli::run(std::env::args());
    std::process::exit(code);
}
