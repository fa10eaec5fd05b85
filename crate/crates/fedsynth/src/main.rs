use clap::Parser;

fn main() {
    let cli = fedsynth::driver::Cli::parse();
    if let Err(e) = fedsynth::driver::run(&cli) {
        eprintln!("error: {}", e);
        std::process::exit(1);
    }
}
