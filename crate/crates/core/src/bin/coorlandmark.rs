fn main() {
    std::process::exit(coorlandmark::cli::main());
}
