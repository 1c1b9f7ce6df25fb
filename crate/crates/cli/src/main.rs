use clap::Parser;

fn main() {
    let cli = biparam::Cli::parse();
    std::process::exit(biparam::run(&cli));
}
