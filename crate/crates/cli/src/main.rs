fn main() {
    std::process::exit(cva_cli::dispatch(std::env::args_os()));
}
