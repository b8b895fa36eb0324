use clap::Parser;

fn main() {
    let cli = intermpl::cli::Cli::parse();
    if let Err(e) = intermpl::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
