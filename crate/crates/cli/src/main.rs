use clap::Parser;
use opsc_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let code = match run(&cli, &mut std::io::stdout().lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code().0
        }
    };
    std::process::exit(code);
}
