use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use stagesim::config::load_config;
use stagesim::metrics::{render_text, Summary};
use stagesim::sweep::{Sweep, SweepResult};
use stagesim::{run, SimError};

#[derive(Parser)]
#[command(
    name = "stagesim",
    version,
    about = "Discrete-event simulator for multi-stage LLM serving"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one configuration and write report.json, requests.csv and trace.json.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Evaluate every point of the config's [sweep] section and write sweep.json and sweep.csv.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        /// Ranked points to print.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Print a previously written run or sweep output directory.
    Report {
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn execute(cmd: Command) -> Result<(), SimError> {
    match cmd {
        Command::Run { config, seed, out } => {
            let cfg = load_config(&config)?;
            let report = run(cfg.simulation(seed)?)?;
            std::fs::create_dir_all(&out).map_err(|e| SimError::io(&out, e))?;
            report.write_json(&out.join("report.json"))?;
            report.write_requests_csv_file(&out.join("requests.csv"))?;
            report.write_chrome_trace(&out.join("trace.json"))?;
            print!("{}", render_text(&report.summary));
            println!("wrote {}", out.display());
        }
        Command::Sweep {
            config,
            seed,
            out,
            workers,
            top,
        } => {
            if workers == Some(0) {
                return Err(SimError::config("workers", "must be >= 1"));
            }
            let cfg = load_config(&config)?;
            let result = Sweep::new(&cfg, seed)?.run(workers)?;
            result.write_files(&out)?;
            print!("{}", result.render_text(top));
            println!("wrote {}", out.display());
        }
        Command::Report { dir, format } => report(&dir, format)?,
    }
    Ok(())
}

fn read(path: &Path) -> Result<String, SimError> {
    std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))
}

fn report(dir: &Path, format: Format) -> Result<(), SimError> {
    let run_json = dir.join("report.json");
    if run_json.exists() {
        match format {
            Format::Csv => print!("{}", read(&dir.join("requests.csv"))?),
            Format::Json => print!("{}", read(&run_json)?),
            Format::Text => {
                let doc: serde_json::Value =
                    serde_json::from_str(&read(&run_json)?).map_err(|e| SimError::Metrics(e.to_string()))?;
                let summary: Summary = serde_json::from_value(doc["summary"].clone())
                    .map_err(|e| SimError::Metrics(format!("{}: {e}", run_json.display())))?;
                print!("{}", render_text(&summary));
            }
        }
        return Ok(());
    }
    let sweep_json = dir.join("sweep.json");
    if sweep_json.exists() {
        match format {
            Format::Csv => print!("{}", read(&dir.join("sweep.csv"))?),
            Format::Json => print!("{}", read(&sweep_json)?),
            Format::Text => {
                let result: SweepResult = serde_json::from_str(&read(&sweep_json)?)
                    .map_err(|e| SimError::Metrics(format!("{}: {e}", sweep_json.display())))?;
                print!("{}", result.render_text(usize::MAX));
            }
        }
        return Ok(());
    }
    Err(SimError::config(
        "dir",
        format!("{} holds neither report.json nor sweep.json", dir.display()),
    ))
}
