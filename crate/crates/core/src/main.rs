fn main() {
    std::process::exit(region_uncertainty::cli::run(std::env::args_os()));
}
