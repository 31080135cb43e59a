fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(microcurl::cli_io::run_command(&args));
}
