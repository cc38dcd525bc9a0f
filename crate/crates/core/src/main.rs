fn main() {
    std::process::exit(mlirt::commands::run(std::env::args_os()));
}
