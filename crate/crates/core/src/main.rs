fn main() {
    std::process::exit(swarm_dispersal::cli::main_with_args(std::env::args_os()));
}
