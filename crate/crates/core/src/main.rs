//! `pmq` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pmq::cli::{self, PipelineConfig, Stage};

#[derive(Parser)]
#[command(name = "pmq", version, about = "Patch-wise mixed-precision quantisation of a toy ViT")]
struct Cli {
    /// TOML pipeline configuration; defaults apply to missing keys.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set allocation.budget={bits=9000}`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test splits.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the float model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sensitivity, allocation, patch reassignment and evaluation.
    Run {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: Stage,
    },
    /// Summarise a run directory and write plot CSVs.
    Report {
        #[arg(long)]
        artifacts: PathBuf,
        /// Where plot CSVs go (default: <artifacts>/plots).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn run(cli: Cli) -> pmq::Result<()> {
    let cfg = PipelineConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenData { out } => {
            cli::cmd_gen_data(&cfg, &out)?;
        }
        Command::Train { data, out } => {
            cli::cmd_train(&cfg, &data, &out)?;
        }
        Command::Run { data, checkpoint, out, stage } => {
            let inputs = cli::RunInputs::load(&checkpoint, &data)?;
            if let Some(r) = cli::cmd_run(&cfg, &inputs, &out, stage)? {
                println!("{}", serde_json::to_string_pretty(&r).expect("report serialises"));
            }
        }
        Command::Report { artifacts, out } => {
            let out = out.unwrap_or_else(|| artifacts.join("plots"));
            print!("{}", cli::report::cmd_report(&artifacts, &out)?);
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
