use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use probe_core::config::{Overrides, PipelineConfig};
use probe_core::pipeline::{Pipeline, StageSummary};

#[derive(Parser)]
#[command(name = "probe", version, about = "Dual-persona contrastive rewrite evaluation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration file (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Restrict the run to these model ids (repeatable).
    #[arg(long = "model")]
    models: Vec<String>,
    /// Override the seed recorded in the manifest.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Collect persona-paired rewrites (and any annotation conditions).
    Rewrite(Common),
    /// Filter non-compliant pairs and compute per-pair metrics.
    Score(Common),
    /// Paired tests over the NT-minus-autistic deltas.
    Stats(Common),
    /// Render charts and tables from the run directory.
    Report(Common),
    /// Derive trust-weighted labels from annotator profiles.
    Groundtruth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        profiles: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Multi-agent qualitative coding over rewrites and reasoning outputs.
    Qual(Common),
    /// Validate the corpus and summarise annotator agreement.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        band_size: usize,
    },
}

fn load(common: &Common) -> Result<PipelineConfig> {
    let overrides = Overrides {
        models: common.models.clone(),
        seed: common.seed,
        out_dir: common.out.clone(),
    };
    Ok(PipelineConfig::load(&common.config, &overrides)?)
}

fn run(cli: Cli) -> Result<StageSummary> {
    match cli.command {
        Command::Rewrite(c) => Pipeline::new(load(&c)?).cmd_rewrite(),
        Command::Score(c) => Pipeline::new(load(&c)?).cmd_score(),
        Command::Stats(c) => Pipeline::new(load(&c)?).cmd_stats(),
        Command::Report(c) => Pipeline::new(load(&c)?).cmd_report(),
        Command::Qual(c) => Pipeline::new(load(&c)?).cmd_qual(),
        Command::Groundtruth {
            common,
            profiles,
            labels,
            threshold,
        } => {
            let mut cfg = load(&common)?;
            cfg.groundtruth.profiles = profiles.or(cfg.groundtruth.profiles);
            cfg.groundtruth.labels = labels.or(cfg.groundtruth.labels);
            cfg.groundtruth.threshold = threshold.or(cfg.groundtruth.threshold);
            Pipeline::new(cfg).cmd_groundtruth()
        }
        Command::Ingest { common, band_size } => Pipeline::new(load(&common)?).cmd_ingest(band_size),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(summary) => {
            if !summary.run_id.is_empty() {
                println!("run {}", summary.run_id);
            }
            for f in &summary.written {
                println!("wrote {}", summary.run_dir.join(f).display());
            }
            for n in &summary.notes {
                println!("{n}");
            }
            if summary.ok() {
                ExitCode::SUCCESS
            } else {
                eprintln!("{} record-level errors:", summary.errors.len());
                for e in &summary.errors {
                    eprintln!("  {} {} {}: {}", e.model_id, e.record_id, e.condition, e.error);
                }
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
