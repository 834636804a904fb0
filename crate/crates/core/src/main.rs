fn main() {
    std::process::exit(bpshift::cli::run(std::env::args_os()));
}
