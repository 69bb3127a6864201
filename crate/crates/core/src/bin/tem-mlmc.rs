fn main() {
    std::process::exit(tem_mlmc::cli::main_with_args(std::env::args_os()));
}
