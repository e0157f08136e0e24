fn main() {
    std::process::exit(slatmorph::cli::run(std::env::args_os()));
}
