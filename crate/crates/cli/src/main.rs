use std::fs;
use std::io::{self, Write};
use std::process::ExitCode;

use advex_cli::commands::{run, Cli};
use advex_cli::error::CliError;
use clap::error::ErrorKind;
use clap::Parser;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Usage(e.render().to_string().trim().to_string())),
    };
    let out = cli.out.clone();
    let result = run(cli).and_then(|v| {
        let text = serde_json::to_string_pretty(&v)?;
        match out {
            Some(p) => fs::write(p, text + "\n")?,
            None => match writeln!(io::stdout(), "{text}") {
                Err(e) if e.kind() == io::ErrorKind::BrokenPipe => {}
                r => r?,
            },
        }
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.exit_code() as u8)
}
