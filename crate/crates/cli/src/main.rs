fn main() {
    std::process::exit(pamlab::main_with(std::env::args_os()));
}
