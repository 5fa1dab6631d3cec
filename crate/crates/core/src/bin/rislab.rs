use clap::Parser;

fn main() {
    if let Err(e) = rislab::cli::Cli::parse().execute() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
