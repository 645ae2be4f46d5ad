fn main() {
    std::process::exit(tdir_cli::main_with(std::env::args_os()));
}
