fn main() {
    std::process::exit(idguide::orchestrator::main_with_args(std::env::args_os()));
}
