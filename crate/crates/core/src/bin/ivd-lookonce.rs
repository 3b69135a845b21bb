fn main() {
    std::process::exit(ivd_lookonce::cli::main_with(std::env::args_os()));
}
