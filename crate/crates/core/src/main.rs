fn main() {
    std::process::exit(align_cruse::cli::run(std::env::args_os()));
}
