use clap::Parser;
use pcodex::cli::{run_cli, Cli, CliError};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run_cli(cli) {
        Ok(report) => {
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            for f in &report.findings {
                println!(
                    "FINDING [{}] {} at {:#x}: {}",
                    report.strategy, f.kind, f.address, f.message
                );
            }
            println!(
                "{}: {} findings, {} steps, {} paths",
                report.exit_status,
                report.findings.len(),
                report.stats.steps,
                report.stats.paths
            );
            std::process::exit(report.process_exit_code());
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(3);
        }
    }
}
