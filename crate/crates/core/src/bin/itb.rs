fn main() {
    std::process::exit(instruction_inversion::cli::run(std::env::args_os()));
}
