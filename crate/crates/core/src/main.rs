use clap::Parser;

fn main() {
    let cli = pgnniv::cli::Cli::parse();
    if let Err(e) = pgnniv::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
