fn main() {
    std::process::exit(tofe_harness::cli::run(std::env::args_os()));
}
