fn main() {
    std::process::exit(sketchmatch::cli::run(std::env::args_os()));
}
