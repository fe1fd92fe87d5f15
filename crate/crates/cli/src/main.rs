fn main() {
    std::process::exit(avfusion_cli::run(std::env::args_os()));
}
