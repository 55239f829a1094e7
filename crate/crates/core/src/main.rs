fn main() {
    let env = unsuid::host_env();
    std::process::exit(unsuid::cli::run_cli(std::env::args().collect(), &env));
}
