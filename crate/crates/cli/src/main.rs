fn main() {
    std::process::exit(spikcommander_cli::dispatch(std::env::args_os()));
}
