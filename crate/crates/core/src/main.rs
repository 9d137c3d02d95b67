fn main() {
    std::process::exit(bpam::cli::main_with_args(std::env::args_os()));
}
