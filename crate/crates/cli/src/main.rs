fn main() {
    std::process::exit(lazy_mdp_cli::run(std::env::args_os()));
}
