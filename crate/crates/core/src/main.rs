fn main() {
    std::process::exit(pcnsim::cli::main(std::env::args_os()));
}
