//! Library side of the `attnguide` command: run configs, manifests and the
//! command implementations, so tests can drive them in-process.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use args::{Cli, Command};
pub use error::{CliError, CliResult};

/// Executes a parsed command line and prints a short summary.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => {
            let cfg = a.resolve()?;
            let out = commands::train(&cfg)?;
            match out.report.final_loss {
                Some(l) => println!(
                    "trained {} steps, final loss {l:.5} (target {}), checkpoint in {}",
                    cfg.train.steps,
                    cfg.train.target_loss,
                    cfg.out.display()
                ),
                None => println!("wrote initial checkpoint to {}", cfg.out.display()),
            }
        }
        Command::Sample(a) => {
            let cfg = a.resolve()?;
            let out = commands::sample(&cfg)?;
            println!(
                "wrote {} files to {} ({} guided steps)",
                out.manifest.outputs.len(),
                cfg.out.display(),
                out.guided_steps
            );
        }
        Command::Eval(a) => {
            let cfg = a.resolve()?;
            let out = commands::eval(&cfg)?;
            print!("{}", out.report.table());
        }
        Command::ExportDataset(a) => {
            let cfg = a.resolve()?;
            let index = commands::export(&cfg)?;
            println!(
                "wrote {} scenes to {}",
                index.records.len(),
                cfg.out.display()
            );
        }
        Command::Replay(a) => {
            let out = commands::replay(&a.manifest, a.out.clone())?;
            if out.mismatched.is_empty() {
                println!(
                    "replay matches: {} files identical",
                    out.manifest.outputs.len()
                );
            } else {
                for m in &out.mismatched {
                    eprintln!("differs: {m}");
                }
                return Err(CliError::Core(attnguide::Error::Internal(format!(
                    "{} replayed files differ",
                    out.mismatched.len()
                ))));
            }
        }
    }
    Ok(())
}
