fn main() {
    if let Err(e) = foley::cli::configure_threads() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
    std::process::exit(foley::cli::run(std::env::args_os()));
}
