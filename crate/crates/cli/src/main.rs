use clap::Parser;

fn main() {
    let cli = fedvalue_cli::Cli::parse();
    if let Err(e) = fedvalue_cli::run(cli) {
        eprintln!("fedvalue: {e}");
        std::process::exit(e.exit_code());
    }
}
