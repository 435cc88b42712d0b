use clap::Parser;

fn main() {
    let cli = nnclr_cli::Cli::parse();
    if let Err(e) = nnclr_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
