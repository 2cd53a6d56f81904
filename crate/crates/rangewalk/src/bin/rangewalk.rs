fn main() {
    std::process::exit(rangewalk::cli::run_main());
}
