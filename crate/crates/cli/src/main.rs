use clap::Parser;

fn main() {
    let cli = prefdyn_cli::Cli::parse();
    if let Err(e) = prefdyn_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
