use clap::Parser;

fn main() {
    let cli = crownseg::cli::Cli::parse();
    if let Err(e) = crownseg::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
