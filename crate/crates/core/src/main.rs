use clap::Parser;

fn main() {
    let cli = drape::cli::Cli::parse();
    if let Err(err) = drape::cli::run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
