fn main() {
    std::process::exit(nucprop::cli::run(std::env::args_os()));
}
