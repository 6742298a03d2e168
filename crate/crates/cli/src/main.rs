fn main() {
    std::process::exit(fisher_ngd_cli::run(std::env::args_os()));
}
