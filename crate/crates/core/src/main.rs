fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(stochbolza::cli::run(&args));
}
