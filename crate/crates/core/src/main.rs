fn main() {
    std::process::exit(lvseg::cli::run(std::env::args_os()));
}
