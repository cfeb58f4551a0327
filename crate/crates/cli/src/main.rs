use clap::Parser;

fn main() {
    let cli = groupnet_cli::Cli::parse();
    std::process::exit(groupnet_cli::run(cli));
}
