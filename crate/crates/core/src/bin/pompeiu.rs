fn main() {
    std::process::exit(pompeiu::cli::run_cli());
}
