use clap::Parser;
use iqa_troubleshoot_cli::commands::{run, Cli};
use iqa_troubleshoot_cli::{exit, exit_code};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(exit_code(&e));
        }
    }
}
