use clap::Parser;
use contrastlab_cli::{run_from_args, Cli};

fn main() {
    let code = match run_from_args(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
