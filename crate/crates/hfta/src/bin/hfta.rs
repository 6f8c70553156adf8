use clap::Parser;

fn main() {
    let cli = hfta::cli::Cli::parse();
    std::process::exit(hfta::cli::run(cli));
}
