use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod config;
mod report;
mod run;

use config::{load_config, CliError, ExperimentMode};

#[derive(Parser)]
#[command(name = "smope", version, about = "Sparse mixture-of-prompt-experts experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Run this seed only, replacing the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to `output_dir` or `runs/<config stem>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the configured mode.
        #[arg(long, value_enum)]
        mode: Option<ExperimentMode>,
    },
    /// Aggregate a run directory into report.txt and TSV files.
    Report { dir: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e);
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run {
            config,
            seed,
            out,
            mode,
        } => {
            let mut loaded = load_config(&config)?;
            if let Some(s) = seed {
                loaded.experiment.seeds = vec![s];
            }
            if let Some(m) = mode {
                loaded.experiment.mode = m;
            }
            let dir = run::output_dir(&loaded, out);
            run::execute(&loaded, &dir)?;
            println!("results in {}", dir.display());
            Ok(())
        }
        Command::Report { dir } => {
            let text = report::emit_report(&dir)?;
            print!("{}", text);
            Ok(())
        }
    }
}
