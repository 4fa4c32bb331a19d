fn main() {
    std::process::exit(dig2dig::cli::run(std::env::args_os()));
}
