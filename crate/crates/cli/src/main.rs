fn main() {
    std::process::exit(tcprune::dispatch(std::env::args().collect()));
}
