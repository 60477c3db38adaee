fn main() {
    env_logger::init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    std::process::exit(manipdet_cli::run(&argv));
}
