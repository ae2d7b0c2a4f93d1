use clap::Parser;

fn main() {
    let cli = nowcast_cli::Cli::parse();
    if let Err(e) = nowcast_cli::run(cli) {
        eprintln!("error: {:#}", e);
        std::process::exit(nowcast_cli::exit_code(&e));
    }
}
