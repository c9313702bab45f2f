use clap::Parser;

fn main() {
    let cli = trajclust::cli::Cli::parse();
    std::process::exit(trajclust::cli::run(cli));
}
