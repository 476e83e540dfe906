use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use lago_cli::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let message = e.kind().to_string();
            eprintln!(
                "{}",
                serde_json::json!({"error": {"kind": "usage", "message": message}})
            );
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.json_line());
            eprintln!("error: {}", e.message);
            ExitCode::from(1)
        }
    }
}
