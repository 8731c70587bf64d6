use clap::error::ErrorKind;
use clap::Parser;
use gpml_cli::config::expand_args;
use gpml_cli::{execute, Cli, CliError, EXIT_USAGE};

fn main() {
    let args = match expand_args(std::env::args_os().collect()) {
        Ok(args) => args,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let informational = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            std::process::exit(if informational { 0 } else { EXIT_USAGE });
        }
    };
    if let Err(e) = execute(&cli) {
        match &e {
            CliError::Load(load) => eprintln!("error[{}]: {load}", load.code()),
            other => eprintln!("error: {other}"),
        }
        std::process::exit(e.exit_code());
    }
}
