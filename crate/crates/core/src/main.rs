fn main() {
    std::process::exit(dflat::cli::run(std::env::args_os()));
}
