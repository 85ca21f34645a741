use clap::Parser;

fn main() {
    let cli = fmtasr::cli::Cli::parse();
    if let Err(e) = fmtasr::cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
