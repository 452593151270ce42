use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowconvert_cli::commands::{self, RequestManifest, RowStatus};
use flowconvert_cli::{exit_code, RunConfig};
use flowconvert_core::Result;

#[derive(Parser)]
#[command(name = "flowconvert", version, about = "Flow-based accent conversion on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing corpus.
        #[arg(long)]
        force: bool,
    },
    /// Train one stage (flow, duration, attention, classifiers) or all of them.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "all")]
        stage: String,
    },
    /// Convert the utterances listed in a request manifest.
    Convert {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Request manifest (TOML); defaults to every test utterance into every other accent.
        #[arg(long)]
        requests: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score converted outputs and write the report tables.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        converted: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify that every artifact under the given paths shares one provenance stamp.
    Check {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, force } => {
            let cfg = config.resolve()?;
            let corpus = commands::gen_data(&cfg, &out, force)?;
            println!(
                "corpus: {} utterances, config {}, seed {}",
                corpus.utterances.len(),
                cfg.hash(),
                cfg.seed
            );
        }
        Command::Train {
            config,
            corpus,
            out,
            stage,
        } => {
            let cfg = config.resolve()?;
            let stages = commands::parse_stages(&stage)?;
            for ckpt in commands::train(&cfg, &corpus, &out, &stages)? {
                let metrics: Vec<String> = ckpt.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
                println!("{}: {} steps, {}", ckpt.stage, ckpt.steps, metrics.join(" "));
            }
        }
        Command::Convert {
            config,
            checkpoints,
            corpus,
            requests,
            out,
        } => {
            let cfg = config.resolve()?;
            let manifest = match &requests {
                Some(path) => RequestManifest::from_path(path)?,
                None => default_requests(&cfg, &corpus)?,
            };
            let done = commands::convert_requests(&cfg, &checkpoints, &corpus, &manifest, &out)?;
            let failed = done.rows.iter().filter(|r| r.status == RowStatus::Error).count();
            println!(
                "converted {} of {} rows ({failed} failed); manifest in {}",
                done.rows.len() - failed,
                done.rows.len(),
                out.join("manifest.json").display()
            );
        }
        Command::Evaluate {
            config,
            checkpoints,
            corpus,
            converted,
            out,
        } => {
            let cfg = config.resolve()?;
            let report = commands::evaluate(&cfg, &checkpoints, &corpus, &converted, &out)?;
            print!("{}", report.to_text());
        }
        Command::Check { paths } => {
            let summary = commands::check(&paths)?;
            println!(
                "{} artifacts consistent: format {}, config {}, seed {}",
                summary.files,
                summary.provenance.format_version,
                summary.provenance.config_hash,
                summary.provenance.seed
            );
        }
        Command::ShowConfig { config } => {
            let cfg = config.resolve()?;
            print!("{}", cfg.to_toml()?);
        }
    }
    Ok(())
}

fn default_requests(cfg: &RunConfig, corpus_dir: &Path) -> Result<RequestManifest> {
    let corpus = commands::load_corpus(cfg, corpus_dir)?;
    RequestManifest::default_for(cfg, &corpus)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
