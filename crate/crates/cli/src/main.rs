fn main() {
    std::process::exit(fieldseg_cli::run(std::env::args_os()));
}
